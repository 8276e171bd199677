//! Temporal-segment augmentation for training and segmented inference.
//!
//! cargo run --release --example temporal_segments

use moretool::data::{augment_dataset, generate_synthetic, AnyDataset, SynthConfig};
use moretool::ensemble::{segmented_predictions, SEGMENT_WEIGHTS};
use moretool::metrics::gap_at_k;
use moretool::models::ModelSpec;
use moretool::training::{train, TrainConfig};

fn main() -> moretool::Result<()> {
    let (ds, _) = generate_synthetic(&SynthConfig::new(1200, 20, 24, 2))?;
    let (tr, val_frames) = ds.split(0.8);
    let aug = augment_dataset(&tr, 3)?;
    println!("{} training videos -> {} augmented examples", tr.len(), aug.len());

    let val = AnyDataset::Frame(val_frames.clone());
    let tc = TrainConfig {
        base_lr: 0.02,
        batch_size: Some(64),
        epochs: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let spec = ModelSpec::more(24, 20, 4, 48);
    for (name, data) in [("plain", AnyDataset::Frame(tr)), ("augmented", AnyDataset::Video(aug))] {
        let run = train(spec.clone(), &data, Some(&val), &tc, None)?;
        let plain = run.log.last().and_then(|e| e.gap).unwrap_or(f64::NAN);
        let seg = gap_at_k(
            &segmented_predictions(&run.model, &val_frames, 3, &SEGMENT_WEIGHTS)?,
            20,
        )?;
        println!("{name:<10} GAP {plain:.4}, with segmented inference {seg:.4}");
    }
    Ok(())
}
