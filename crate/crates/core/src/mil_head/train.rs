use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MilHeadParams;
use crate::data_model::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MilHeadParams,
    /// Mean batch loss of every epoch, measured before each batch's update.
    pub curve: Vec<f64>,
}

/// Plain SGD, one step per batch, batches visited in a seeded shuffled order.
pub fn sgd_train<B>(
    init: MilHeadParams,
    batches: &[B],
    cfg: &TrainConfig,
    mut loss_and_grads: impl FnMut(&MilHeadParams, &B) -> Result<(f64, MilHeadParams)>,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::config("train.epochs", "must be >= 1"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::config("train.learning_rate", "must be > 0"));
    }
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = loss_and_grads(&params, &batches[i])?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += loss;
            params.add_scaled(&grads, -cfg.learning_rate);
        }
        curve.push(if batches.is_empty() { 0.0 } else { total / batches.len() as f64 });
    }
    Ok(TrainOutcome { params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil_head::{psm_loss_and_grads, Mat, PsmBatch, PsmObject};

    fn toy_batches() -> Vec<PsmBatch> {
        // class is linearly encoded in the first two feature coordinates
        (0..8)
            .map(|i| {
                let class_id = i % 2;
                let mut a = vec![0.1; 4];
                a[class_id] = 1.0;
                PsmBatch {
                    objects: vec![PsmObject {
                        features: Mat::from_rows(&[a, vec![0.2, 0.2, 0.5, 0.1]]),
                        s_dis: vec![1.0, 1.0],
                        class_id,
                    }],
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_a_config_error() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let r = sgd_train(MilHeadParams::new(4, 8, 2, 0), &toy_batches(), &cfg, psm_loss_and_grads);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn toy_task_loss_halves_and_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.1,
            hidden: 8,
            seed: 5,
        };
        let run = || sgd_train(MilHeadParams::new(4, 8, 2, 1), &toy_batches(), &cfg, psm_loss_and_grads).unwrap();
        let a = run();
        assert!(a.curve[49] <= 0.5 * a.curve[0], "{:?}", a.curve);
        assert_eq!(a, run());
    }
}
