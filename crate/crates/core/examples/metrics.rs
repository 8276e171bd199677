//! GAP, mAP and PERR on a small hand-made prediction set, next to the
//! brute-force reference implementations.
//!
//! cargo run --example metrics

use moretool::metrics::oracle::{oracle_gap, oracle_map, oracle_perr};
use moretool::metrics::{evaluate, PredictionSet};

fn main() -> moretool::Result<()> {
    let preds = PredictionSet::new(
        vec!["a".into(), "b".into()],
        3,
        vec![0.9, 0.8, 0.1, 0.0, 0.7, 0.6],
        vec![vec![0], vec![1, 2]],
    )?;
    let r = evaluate(&preds, 2)?;
    println!(
        "GAP@2 {:.6} (29/36 = {:.6}, reference {:.6})",
        r.gap,
        29.0 / 36.0,
        oracle_gap(&preds, 2)
    );
    println!("mAP   {:.6} (reference {:.6})", r.map, oracle_map(&preds));
    println!("PERR  {:.6} (reference {:.6})", r.perr, oracle_perr(&preds));
    for (c, ap) in r.per_class_ap.iter().enumerate() {
        println!("  class {c}: AP {ap:?}");
    }
    Ok(())
}
