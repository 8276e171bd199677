//! Frame-level models: attentive DBoF and NetVLAD pooling, trained briefly
//! and checked for invariance to frame order.
//!
//! cargo run --release --example frame_pooling

use moretool::data::{generate_synthetic, AnyDataset, SynthConfig};
use moretool::models::{Assignment, Input, ModelSpec, Pooling};
use moretool::tensor::Tensor;
use moretool::training::{train, TrainConfig};

fn main() -> moretool::Result<()> {
    let (ds, _) = generate_synthetic(&SynthConfig::new(600, 10, 12, 5))?;
    let (tr, val) = ds.split(0.8);
    let probe = val.examples[0].frames.clone();
    let (tr, val) = (AnyDataset::Frame(tr), AnyDataset::Frame(val));

    let tc = TrainConfig {
        base_lr: 0.02,
        batch_size: Some(32),
        epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let poolings = [
        ("attentive DBoF", Pooling::AttentiveDbof { code_dim: 16 }),
        (
            "NetVLAD",
            Pooling::NetVlad {
                clusters: 4,
                code_dim: 8,
                out_dim: 16,
                assignment: Assignment::Softmax,
            },
        ),
    ];
    for (name, pooling) in poolings {
        let run = train(
            ModelSpec::moe(12, 10, 2).with_pooling(pooling),
            &tr,
            Some(&val),
            &tc,
            None,
        )?;
        let gap = run.log.last().and_then(|e| e.gap).unwrap_or(f64::NAN);

        let (t, d) = probe.dims2();
        let reversed = Tensor::new(&[t, d], (0..t).rev().flat_map(|i| probe.row(i).to_vec()).collect())?;
        let a = run.model.predict(Input::Frames(std::slice::from_ref(&probe)))?;
        let b = run.model.predict(Input::Frames(std::slice::from_ref(&reversed)))?;
        println!(
            "{name:<15} GAP {gap:.4}; reversed frames give identical output: {}",
            a == b
        );
    }
    Ok(())
}
