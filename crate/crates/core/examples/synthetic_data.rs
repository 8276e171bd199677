//! Generate a synthetic corpus, inspect its label structure and save it in
//! both file formats.
//!
//! cargo run --release --example synthetic_data

use moretool::data::{generate_synthetic, load_dataset, save_dataset, AnyDataset, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = SynthConfig::new(4000, 21, 16, 7);
    cfg.hierarchy_depth = 2;
    cfg.cooccurrence_strength = 0.8;
    let (ds, truth) = generate_synthetic(&cfg)?;

    let n = ds.len() as f64;
    let freq = |c: usize| ds.examples.iter().filter(|e| e.labels.contains(&c)).count() as f64 / n;
    let mean_labels = ds.examples.iter().map(|e| e.labels.len()).sum::<usize>() as f64 / n;
    println!(
        "{} videos, {} classes ({} leaves), {mean_labels:.2} labels per video",
        ds.len(),
        ds.num_classes,
        truth.num_leaves
    );

    for &(a, b) in truth.pairs.iter().take(4) {
        let both = ds
            .examples
            .iter()
            .filter(|e| e.labels.contains(&a) && e.labels.contains(&b))
            .count() as f64
            / n;
        println!("pair ({a:>2}, {b:>2}): PMI {:.3}", (both / (freq(a) * freq(b))).ln());
    }
    for leaf in [0, 5] {
        if let Some(&p) = truth.ancestors(leaf).first() {
            println!(
                "leaf {leaf} -> parent {p}: P(leaf) {:.3}, P(parent) {:.3}",
                freq(leaf),
                freq(p)
            );
        }
    }

    let dir = std::env::temp_dir().join("moretool-synthetic-example");
    std::fs::create_dir_all(&dir)?;
    let any = AnyDataset::Frame(ds);
    for name in ["corpus.jsonl", "corpus.mtds"] {
        let path = dir.join(name);
        save_dataset(&path, &any)?;
        let back = load_dataset(&path)?;
        println!(
            "{}: {} bytes, {} videos read back",
            path.display(),
            std::fs::metadata(&path)?.len(),
            back.len()
        );
    }
    Ok(())
}
