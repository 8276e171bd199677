//! Leave-one-out weighted fusion and greedy ensemble growth over a pool of
//! models trained with different seeds and architectures.
//!
//! cargo run --release --example ensemble

use moretool::data::{generate_synthetic, AnyDataset, SynthConfig};
use moretool::ensemble::{fuse, greedy_grow, leave_one_out_weights, Metric};
use moretool::metrics::{gap_at_k, PredictionSet};
use moretool::models::ModelSpec;
use moretool::training::{predict_dataset, train, Prepared, TrainConfig};

fn main() -> moretool::Result<()> {
    let (ds, _) = generate_synthetic(&SynthConfig::new(1200, 20, 24, 9))?;
    let (tr, val) = ds.split(0.8);
    let (tr, val) = (AnyDataset::Frame(tr), AnyDataset::Frame(val));

    let mut names = Vec::new();
    let mut pool: Vec<PredictionSet> = Vec::new();
    for (i, spec) in [
        ModelSpec::moe(24, 20, 4),
        ModelSpec::more(24, 20, 4, 48),
        ModelSpec::more(24, 20, 2, 32),
    ]
    .into_iter()
    .enumerate()
    {
        for seed in [1, 2] {
            let tc = TrainConfig {
                base_lr: 0.02,
                batch_size: Some(64),
                epochs: 6,
                seed,
                ..TrainConfig::default()
            };
            let run = train(spec.clone(), &tr, None, &tc, None)?;
            let preds = predict_dataset(&run.model, &Prepared::for_model(&run.model.spec, &val)?)?;
            names.push(format!("model{i}-seed{seed}"));
            println!("{:<14} GAP {:.4}", names.last().unwrap(), gap_at_k(&preds, 20)?);
            pool.push(preds);
        }
    }
    let refs: Vec<&PredictionSet> = pool.iter().collect();
    let metric = Metric::Gap { k: 20 };

    let report = leave_one_out_weights(&names, &refs, metric)?;
    println!("equal-weight baseline {:.4}", report.baseline);
    for m in &report.members {
        println!("  {:<14} drop {:+.5} weight {:.3}", m.name, m.drop, m.weight);
    }
    println!(
        "leave-one-out fusion GAP {:.4}",
        gap_at_k(&fuse(&refs, &report.weights())?, 20)?
    );

    let grown = greedy_grow(&names, &refs, 2, metric, 0, 100)?;
    for step in &grown.trace {
        println!(
            "  added {:?} kept {:?} score {:.4} accepted {}",
            step.added, step.kept, step.score, step.accepted
        );
    }
    let chosen: Vec<&str> = grown.selected.iter().map(|&i| names[i].as_str()).collect();
    println!("greedy ensemble {chosen:?} GAP {:.4}", grown.score);
    Ok(())
}
