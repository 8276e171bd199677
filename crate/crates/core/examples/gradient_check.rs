//! Finite-difference gradient checks for every model family.
//!
//! cargo run --release --example gradient_check

use moretool::models::{check_model_gradients, random_problem, Assignment, LCSpec, ModelSpec, Pooling};

fn main() -> moretool::Result<()> {
    let lc = LCSpec {
        latent_dim: 6,
        ..LCSpec::default()
    };
    let vlad = Pooling::NetVlad {
        clusters: 2,
        code_dim: 4,
        out_dim: 5,
        assignment: Assignment::Softmax,
    };
    let specs = [
        ("MoE", ModelSpec::moe(5, 4, 3)),
        ("MoRE", ModelSpec::more(5, 4, 3, 7)),
        ("MoHCE", ModelSpec::mohce(5, 4, 2, vec![4, 3])),
        ("MoRE + latent concepts", ModelSpec::more(5, 4, 2, 6).with_lc(lc)),
        (
            "attentive DBoF",
            ModelSpec::moe(4, 3, 2).with_pooling(Pooling::AttentiveDbof { code_dim: 5 }),
        ),
        ("NetVLAD", ModelSpec::more(4, 3, 2, 6).with_pooling(vlad)),
    ];
    for (name, spec) in specs {
        for seed in 0..3 {
            let (model, batch, labels) = random_problem(&spec, seed, 8)?;
            let r = check_model_gradients(&model, batch.as_input(), &labels, 0.8, seed, 1e-3, 1e-3)?;
            println!(
                "{name:<24} seed {seed}: max rel. error {:.2e} over {} coordinates ({} at kinks) {}",
                r.max_rel_error,
                r.checked,
                r.skipped_kinks,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(())
}
