//! Every method's gradient on one batch, split into positive and negative parts.
//!
//! cargo run --example gradient_zoo

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use siamese_grad::methods::{unified_grad, BatchViews, GradState, MemoryBank, Method, MethodConfig, TargetKind};
use siamese_grad::numerics::{DenseMatrix, FeatureBatch};
use siamese_grad::predictor::{compute_predictor, CorrelationState};
use siamese_grad::verify::decomposition_residual;

fn main() -> siamese_grad::Result<()> {
    let (n, c) = (8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut unit = || FeatureBatch::l2_normalized(DenseMatrix::from_fn(n, c, |_, _| StandardNormal.sample(&mut rng)));
    let (u1, u2) = (unit(), unit());

    let mut corr = CorrelationState::new(c, 0.99)?;
    corr.update(&u1, &u2)?;
    let predictor = compute_predictor(&corr, 0.1)?;
    let bank = MemoryBank::random(256, c, &mut ChaCha8Rng::seed_from_u64(2))?;
    let state = GradState {
        bank: Some(&bank),
        corr: Some(&corr),
        predictor: Some(&predictor),
    };
    let views = BatchViews::new(u1, u2, TargetKind::StopGradient)?;
    let cfg = MethodConfig::default();

    println!("{:<28} {:>9} {:>9} {:>10} {:>9} {:>10}", "method", "|g_pos|", "|g_neg|", "balance", "scale", "residual");
    for method in Method::ALL {
        let d = unified_grad(method, &views, &cfg, state)?;
        let mean_scale = d.scale().iter().sum::<f64>() / d.rows() as f64;
        println!(
            "{:<28} {:>9.4} {:>9.4} {:>10.4} {:>9.4} {:>10.1e}",
            method.id(),
            d.g_pos().frobenius_norm(),
            d.g_neg().frobenius_norm(),
            d.mean_balance(),
            mean_scale,
            decomposition_residual(&d)
        );
    }
    Ok(())
}
