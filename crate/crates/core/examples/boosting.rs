//! Trains gbtree and DART boosters with early stopping on a noisy rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrdet::gbm::{roc_auc, sigmoid, train_with_log, Booster, DenseMatrix, GbmConfig, Validation};

fn data(n: usize, seed: u64) -> anyhow::Result<(DenseMatrix, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let row: [f32; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
        let logit = 6.0 * (row[0] as f64 - 0.5) + 4.0 * (row[1] as f64 * row[2] as f64 - 0.25);
        y.push(u8::from(rng.random::<f64>() < sigmoid(logit)));
        x.extend(row);
    }
    Ok((DenseMatrix::new(x, 4)?, y))
}

fn main() -> anyhow::Result<()> {
    let (x, y) = data(3000, 1)?;
    let (vx, vy) = data(1000, 2)?;
    for booster in [Booster::GbTree, Booster::Dart] {
        let cfg = GbmConfig {
            booster,
            max_depth: 4,
            rounds: 300,
            subsample: 0.8,
            colsample_bytree: 0.8,
            early_stopping_interval: 20,
            ..GbmConfig::default()
        };
        let validation = Validation {
            features: &vx,
            labels: &vy,
        };
        let (model, log) = train_with_log(&x, &y, Some(validation), &cfg)?;
        let auc = roc_auc(&model.predict_matrix(&vx)?, &vy);
        println!(
            "{booster:?}: {} trees, best round {:?}, stopped early {}, validation AUC {auc:.4}",
            model.trees().len(),
            log.best_round,
            log.stopped_early
        );
    }
    Ok(())
}
