//! Late fire of the latent-concept head: the head is attached after a few
//! epochs with a zero output projection, so validation predictions do not
//! move at the moment it appears.
//!
//! cargo run --release --example latent_concepts

use moretool::data::{generate_synthetic, AnyDataset, SynthConfig};
use moretool::models::{LCSpec, ModelSpec};
use moretool::training::{train, TrainConfig};

fn main() -> moretool::Result<()> {
    let mut cfg = SynthConfig::new(1000, 20, 16, 3);
    cfg.cooccurrence_strength = 1.0;
    let (ds, _) = generate_synthetic(&cfg)?;
    let (tr, val) = ds.split(0.8);
    let (tr, val) = (AnyDataset::Frame(tr), AnyDataset::Frame(val));

    let spec = ModelSpec::more(16, 20, 4, 32).with_lc(LCSpec {
        latent_dim: 64,
        ..LCSpec::default()
    });
    let tc = TrainConfig {
        base_lr: 0.02,
        batch_size: Some(64),
        epochs: 8,
        lc_fire_after_epochs: Some(4),
        seed: 3,
        ..TrainConfig::default()
    };
    let run = train(spec, &tr, Some(&val), &tc, None)?;
    for e in &run.log {
        println!(
            "epoch {:>2}  loss {:.4}  GAP {:.4}",
            e.epoch,
            e.loss,
            e.gap.unwrap_or(f64::NAN)
        );
    }
    if let Some(a) = run.attach {
        println!(
            "head attached after epoch {}: predictions identical = {}, GAP {:.6} -> {:.6}",
            a.after_epoch,
            a.predictions_identical,
            a.gap_before.unwrap_or(f64::NAN),
            a.gap_after.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
