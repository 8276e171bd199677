//! Train MoE, MoRE and MoRE with latent concepts on the same synthetic
//! corpus and compare validation GAP.
//!
//! cargo run --release --example train_more

use moretool::data::{generate_synthetic, AnyDataset, SynthConfig};
use moretool::models::{LCSpec, ModelSpec};
use moretool::training::{train, TrainConfig};

fn main() -> moretool::Result<()> {
    let mut cfg = SynthConfig::new(1500, 20, 32, 1);
    cfg.cooccurrence_strength = 0.8;
    let (ds, _) = generate_synthetic(&cfg)?;
    let (tr, val) = ds.split(0.8);
    let (tr, val) = (AnyDataset::Frame(tr), AnyDataset::Frame(val));

    let tc = TrainConfig {
        base_lr: 0.02,
        batch_size: Some(64),
        epochs: 12,
        lc_fire_after_epochs: Some(6),
        seed: 1,
        ..TrainConfig::default()
    };
    let lc = LCSpec {
        latent_dim: 128,
        ..LCSpec::default()
    };
    let specs = [
        ("MoE", ModelSpec::moe(32, 20, 4)),
        ("MoRE", ModelSpec::more(32, 20, 4, 64)),
        ("MoRE + LC", ModelSpec::more(32, 20, 4, 64).with_lc(lc)),
    ];
    for (name, spec) in specs {
        let run = train(spec, &tr, Some(&val), &tc, None)?;
        let last = run.log.last().expect("at least one epoch");
        println!(
            "{name:<10} loss {:.4}  GAP {:.4}  mAP {:.4}  PERR {:.4}",
            last.loss,
            last.gap.unwrap_or(f64::NAN),
            last.map.unwrap_or(f64::NAN),
            last.perr.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
