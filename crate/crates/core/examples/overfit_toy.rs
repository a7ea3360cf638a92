//! Trains the toy network on eight synthetic 64×64 samples and reports the
//! training mean dice every ten epochs.
//!
//! `cargo run --release -p trupnet-core --example overfit_toy [epochs] [augment]`

use std::time::Instant;

use trupnet::data::synth_dataset;
use trupnet::train::{TrainConfig, Trainer};
use trupnet::{ModelConfig, TransRUPNet};

fn main() -> trupnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let augment = args.next().is_some_and(|a| a == "augment");
    let data = synth_dataset(8, 64, 0)?;
    let model = TransRUPNet::new(ModelConfig::toy(), 0)?;
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            epochs,
            augment,
            ..TrainConfig::default()
        },
    )?;
    let start = Instant::now();
    for _ in 0..epochs {
        let stats = trainer.train_epoch(&data, None)?;
        if stats.epoch % 10 == 0 || stats.epoch == 1 {
            let dice = trainer.mean_dice(&data)?;
            println!(
                "epoch {:4}  loss {:.4}  mDSC {:.4}  {:.1}s",
                stats.epoch,
                stats.mean_loss,
                dice,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
