//! The analytic predictor built from a running correlation estimate, and the
//! balance factor it induces between positive and negative gradients.
//!
//! cargo run --example directpred_predictor

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use siamese_grad::methods::{unified_grad, BatchViews, GradState, Method, MethodConfig, TargetKind};
use siamese_grad::numerics::{DenseMatrix, FeatureBatch};
use siamese_grad::predictor::{compute_predictor, CorrelationState, PredictorDiagnostics};

fn main() -> siamese_grad::Result<()> {
    let (n, c) = (64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // anisotropic features: coordinate k has scale 1/(k+1)
    let mut batch = || {
        FeatureBatch::l2_normalized(DenseMatrix::from_fn(n, c, |_, k| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / (k + 1) as f64
        }))
    };

    let mut corr = CorrelationState::new(c, 0.9)?;
    for _ in 0..200 {
        corr.update(&batch(), &batch())?;
    }
    let pred = compute_predictor(&corr, 0.1)?;
    println!("trace F = {:.6}", corr.f().trace());
    println!("eigenvalues of F:   {:?}", pred.eig.eigenvalues.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("diag of W_h:        {:?}", pred.wh.diag().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());

    let views = BatchViews::new(batch(), batch(), TargetKind::StopGradient)?;
    let state = GradState {
        corr: Some(&corr),
        predictor: Some(&pred),
        ..GradState::default()
    };
    for method in [Method::ByolDirectpredFull, Method::ByolDirectpredSimplified] {
        let d = unified_grad(method, &views, &MethodConfig::default(), state)?;
        let diag = PredictorDiagnostics::from_lambdas(0, d.balance(), &corr, &pred);
        println!(
            "{:<28} balance mean {:.4} std {:.4}  top eigenvalue {:.4}",
            method.id(),
            diag.lambda_mean,
            diag.lambda_std,
            diag.top_eigenvalue
        );
    }
    Ok(())
}
