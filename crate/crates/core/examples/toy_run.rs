//! Trains on generated ReferToy scenes and reports held-out accuracy.
//!
//! cargo run --release -p refbox-core --example toy_run -- easy 200000 [seed] [mode]

use std::time::Instant;

use rand::SeedableRng;
use refbox::evaluator::{accuracy, evaluate, random_rollout};
use refbox::observation::ContextMode;
use refbox::refertoy::{generate, scene_provider, tasks, Difficulty, ToySpec};
use refbox::trainer::{train_with, TrainConfig};

fn main() -> refbox::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let difficulty = match args.get(1).map(String::as_str).unwrap_or("easy") {
        "hard" => Difficulty::Hard,
        "medium" => Difficulty::Medium,
        _ => Difficulty::Easy,
    };
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200_000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mode = match args.get(4).map(String::as_str) {
        Some("no_spatial") => ContextMode::NoSpatial,
        Some("no_context") => ContextMode::NoContext,
        _ => ContextMode::Full,
    };

    let var = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let spec = |s: u64, n: usize| {
        let mut t = ToySpec::new(difficulty, s, n);
        t.min_side = var("MINSIDE", t.min_side as usize) as u32;
        t.max_side = var("MAXSIDE", t.max_side as usize) as u32;
        t
    };
    let train_scenes = generate(&spec(1000 + seed, 2000))?;
    let test_scenes = generate(&spec(9000 + seed, 500))?;
    let mut all = train_scenes.clone();
    all.extend(test_scenes.iter().cloned());
    let provider = scene_provider(&all)?;

    let config = TrainConfig {
        actor_count: var("ACTORS", 1),
        batch_size: var("BATCH", 20),
        fc1: var("FC", 128),
        fc2: var("FC", 128),
        lstm: var("LSTM", 64),
        total_steps: steps,
        adam: refbox::network::AdamConfig {
            lr: std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4),
            ..Default::default()
        },
        seed,
        context_mode: mode,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train_with(&config, &provider, &tasks(&train_scenes), None, &mut |m| {
        if m.step % 10_000 < 100 {
            eprintln!("{m}");
        }
    })?;
    let secs = start.elapsed().as_secs_f64();
    let results = evaluate(&outcome.params, &tasks(&test_scenes), &provider, &config.env, 1)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let random: Vec<_> = tasks(&test_scenes)
        .iter()
        .map(|t| random_rollout(t, &config.env, &mut rng))
        .collect::<refbox::Result<_>>()?;
    let mean_len = results.iter().map(|r| r.length as f64).sum::<f64>() / results.len() as f64;
    println!(
        "steps={} secs={secs:.1} updates={} accuracy={:.3} random={:.3} mean_len={mean_len:.1}",
        outcome.env_steps,
        outcome.updates,
        accuracy(&results)?,
        accuracy(&random)?
    );
    if std::env::var("DIAG").is_ok() {
        let mut hist = [0usize; 10];
        for r in &results {
            hist[((r.iou * 10.0) as usize).min(9)] += 1;
        }
        let trig = results.iter().filter(|r| r.triggered).count();
        println!("iou histogram {hist:?} triggered={trig}");
        for r in results.iter().take(8) {
            let acts: String = r.actions.iter().map(|a| a.name().chars().next().unwrap()).collect();
            println!("{} iou={:.2} {}", r.task_id, r.iou, acts);
        }
    }
    Ok(())
}
