//! Trains the toy model and prints held-out colour accuracy.
//!
//! `cargo run --release -p animator-core --example toy_run -- [steps] [ablation]`

use std::time::Instant;

use animator_core::data::generate_corpus;
use animator_core::eval::{color_accuracy, swap_flips, toy_model, toy_scene};
use animator_core::train::{smoothed, train, TrainConfig};

fn main() -> animator_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let ablation = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or_default();
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-5);
    let scene = toy_scene();
    let corpus = generate_corpus(1, 64, &scene)?;
    let held_out = generate_corpus(2, 16, &scene)?;
    let config = TrainConfig {
        steps,
        ablation,
        learning_rate: lr,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(toy_model(), &config, &corpus, None)?;
    let s = smoothed(&out.losses, 100);
    for i in (99..s.len()).step_by((s.len() / 10).max(1)) {
        println!("step {:5} smoothed loss {:.4}", i + 1, s[i]);
    }
    println!("final smoothed {:.4}; train {:.1?}", s.last().unwrap(), start.elapsed());
    let start = Instant::now();
    let acc = color_accuracy(&out.model, &held_out, 7, 50)?;
    println!("accuracy {:.3} ({}/{}), ssim {:.4}; eval {:.1?}", acc.accuracy(), acc.hits, acc.total, acc.ssim, start.elapsed());
    println!("distances {:?}", acc.distances);
    let sw = swap_flips(&out.model, &held_out, 7, 50)?;
    println!("swap flips {}/{}", sw.flips, sw.pairs);
    Ok(())
}
