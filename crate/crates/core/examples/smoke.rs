//! Trains the toy model on a generated blob dataset and reports scores.
//!
//! `cargo run --release --example smoke -- <work-dir> [epochs] [config.toml]`

use std::path::PathBuf;
use std::time::Instant;

use usod_core::pipeline::{
    evaluate_model, label_quality, train, write_synthetic_dataset, Model, SyntheticSpec, TrainConfig, TrainOptions,
};

fn main() -> usod_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "smoke-run".into()));
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(25);
    let data = work.join("data");
    let dataset = write_synthetic_dataset(&data, &SyntheticSpec::default())?;

    let mut config = match args.next() {
        Some(path) => TrainConfig::from_toml(&std::fs::read_to_string(path).expect("config"))?,
        None => TrainConfig::smoke(),
    };
    config.epochs = epochs;
    config.data.train_dir = data;
    config.output_dir = work.join("run");

    let before = Model::<f32>::new(config.clone())?;
    println!("before: {:?}", evaluate_model(&before, &dataset)?);
    let t = Instant::now();
    let run = train::<f32>(&config, &TrainOptions::default())?;
    println!("trained {} steps in {:.1?}", run.progress.step, t.elapsed());
    for row in run.log.iter().step_by(10) {
        println!("{}", row.to_line());
    }
    println!("after: {:?}", evaluate_model(&run.model, &dataset)?);
    println!("labels: {:?}", label_quality(&run.model, &dataset)?);
    Ok(())
}
