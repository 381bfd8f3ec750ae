//! Trains the micro head on the synthetic benchmark and prints the learning
//! curve. Pass a seed as the first argument.

use densedet::trainer::{train, TrainConfig};

fn main() -> densedet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = TrainConfig {
        seed,
        epochs: 12,
        ..TrainConfig::default()
    };
    let out = train(&cfg)?;
    for m in &out.history {
        println!("epoch {:>2}  loss {:.4}  AP {:.4}  AP50 {:.4}", m.epoch, m.mean_loss, m.ap, m.ap50);
    }
    let f = &out.final_eval;
    println!("held-out AP {:.4} / AP50 {:.4} / AP75 {:.4}", f.ap, f.ap50, f.ap75);
    Ok(())
}
