//! Training-loop invariants on small synthetic sets.

use alpha_margin::evalkit::sparsity_report;
use alpha_margin::synthdata::{generate, Dataset, SampleCounts, SynthSpec};
use alpha_margin::trainer::{reinitialize_prototypes, train, AlphaConfig, LrStep, TrainConfig};
use alpha_margin::{MarginConfig, MarginMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(k: usize, kappa: f64, seed: u64) -> Dataset {
    generate(&SynthSpec {
        k,
        d: 8,
        samples: SampleCounts::Fixed { per_id: 10 },
        noise_kappa: kappa,
        seed,
    })
    .unwrap()
}

fn cfg(mode: MarginMode, scale: f64, margin: f64, alpha: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr_schedule: vec![LrStep { epoch: 0, lr: 0.05 }],
        momentum: 0.9,
        weight_decay: 5e-4,
        reinit_epoch: None,
        seed: 4,
        hidden: 16,
        emb_dim: 8,
        loss: MarginConfig::new(mode, scale, margin).unwrap(),
        alpha: AlphaConfig::new(alpha),
    }
}

#[test]
fn same_seed_gives_identical_metrics() {
    let d = data(10, 20.0, 1);
    let mut c = cfg(MarginMode::A3m, 16.0, 0.3, 1.5, 4);
    c.reinit_epoch = Some(2);
    let (m1, l1) = train(&d, &c).unwrap();
    let (m2, l2) = train(&d, &c).unwrap();
    assert_eq!(l1.to_csv(), l2.to_csv());
    assert_eq!(l1.events, l2.events);
    assert_eq!(m1, m2);
}

/// Q-Margin with m = 0 and α → 1 is the plain cross-entropy; the loss
/// trajectories agree within 1% after the first epoch.
#[test]
fn near_softmax_limit_tracks_cross_entropy() {
    let d = data(10, 20.0, 2);
    let (_, alpha_log) = train(&d, &cfg(MarginMode::QMargin, 8.0, 0.0, 1.0 + 1e-4, 6)).unwrap();
    let (_, ce_log) = train(&d, &cfg(MarginMode::CosFace, 8.0, 0.0, 1.5, 6)).unwrap();
    for (a, b) in alpha_log.epochs.iter().zip(&ce_log.epochs).skip(1) {
        let rel = (a.loss - b.loss).abs() / b.loss.abs();
        assert!(rel <= 1e-2, "epoch {}: {} vs {}", a.epoch, a.loss, b.loss);
    }
}

#[test]
fn loss_decreases_on_separable_data() {
    let d = data(5, 200.0, 3);
    for mode in [
        MarginMode::QMargin,
        MarginMode::A3m,
        MarginMode::CosFace,
        MarginMode::ArcFace,
    ] {
        let mut c = cfg(mode, 16.0, 0.2, 1.5, 10);
        c.lr_schedule[0].lr = 0.02;
        let (_, log) = train(&d, &c).unwrap();
        for w in log.epochs.windows(2) {
            assert!(
                w[1].loss <= w[0].loss * 1.05 + 1e-9,
                "{mode:?}: {} then {}",
                w[0].loss,
                w[1].loss
            );
        }
        let first = log.epochs.first().unwrap().loss;
        let last = log.epochs.last().unwrap().loss;
        assert!(last < first, "{mode:?}: {first} -> {last}");
    }
}

#[test]
fn reinit_on_converged_embedder_does_not_increase_misalignment() {
    let d = data(8, 100.0, 5);
    for mode in [MarginMode::A3m, MarginMode::QMargin] {
        let c = cfg(mode, 16.0, 0.3, 1.5, 15);
        let (model, _) = train(&d, &c).unwrap();
        let params = c.alpha.params().unwrap();
        let before = sparsity_report(
            &d,
            &model.embedder,
            &model.prototypes().unwrap(),
            &c.loss,
            &params,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = reinitialize_prototypes(&d, &model.embedder, model.k, &mut rng).unwrap();
        let after = sparsity_report(&d, &model.embedder, &w, &c.loss, &params).unwrap();
        assert!(
            after.misaligned_image_fraction <= before.misaligned_image_fraction,
            "{mode:?}: {} -> {}",
            before.misaligned_image_fraction,
            after.misaligned_image_fraction
        );
    }
}
