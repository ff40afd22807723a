//! End-to-end checks across modules on a small world.

use promptlab::encoder::EncoderConfig;
use promptlab::instrumentation::{gradient_ratio_probe, SeedContext};
use promptlab::losses::{LossKind, LossSpec};
use promptlab::methods::{build_method_state, evaluate_accuracy, train, MethodKind, MethodSpec, TrainConfig};
use promptlab::upl::{pseudo_label, select_samples, train_ensemble, ensemble_accuracy, Selection, UplConfig};
use promptlab::world::{corruption_count, sample_dataset, NoiseSpec, Split, WorldConfig};

fn world() -> WorldConfig {
    WorldConfig {
        class_count: 4,
        shots_per_class: 8,
        test_per_class: 20,
        unlabeled_per_class: 16,
        encoder: EncoderConfig {
            token_dim: 8,
            embed_dim: 8,
            context_len: 4,
            hidden_width: 16,
            ..EncoderConfig::default()
        },
        ..WorldConfig::default()
    }
}

fn short() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn every_method_and_loss_trains_on_noisy_labels() {
    let ctx = SeedContext::build(&world(), 3, Some(5)).unwrap();
    for noise in [NoiseSpec::random(0.25), NoiseSpec::confusion(0.25, None)] {
        let (_, data) = ctx.noisy_train(&noise).unwrap();
        assert_eq!(data.noisy_count(), corruption_count(0.25, data.len()));
        for kind in MethodKind::ALL {
            for loss in [LossKind::Ce, LossKind::Gce, LossKind::Sce, LossKind::Ncerce] {
                let state = build_method_state(&MethodSpec::new(kind), &ctx.world, 1).unwrap();
                let cfg = TrainConfig {
                    loss: LossSpec::of(loss),
                    ..short()
                };
                let (state, history) = train(state, &ctx.world, &data, &cfg).unwrap();
                assert_eq!(history.len(), 10);
                assert!(history.iter().all(|h| h.mean_loss.is_finite()));
                let acc = evaluate_accuracy(&state, &ctx.world, &ctx.test).unwrap();
                assert!((0.0..=1.0).contains(&acc));
            }
        }
    }
}

#[test]
fn probe_during_training_never_touches_the_state() {
    let ctx = SeedContext::build(&world(), 0, None).unwrap();
    let (_, data) = ctx.noisy_train(&NoiseSpec::random(0.5)).unwrap();
    let spec = MethodSpec::new(MethodKind::PromptTuning);
    let plain = train(build_method_state(&spec, &ctx.world, 2).unwrap(), &ctx.world, &data, &short()).unwrap();
    let probed = promptlab::methods::train_with_hook(
        build_method_state(&spec, &ctx.world, 2).unwrap(),
        &ctx.world,
        &data,
        &short(),
        |epoch, st| {
            gradient_ratio_probe(st, &ctx.world, &data, 64, &LossSpec::ce(), epoch as u64)?;
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(plain, probed);
}

#[test]
fn upl_pipeline_runs_from_pool_to_ensemble() {
    let cfg = world();
    let ctx = SeedContext::build(&cfg, 1, None).unwrap();
    let unlabeled = sample_dataset(&ctx.world, Split::Unlabeled, &ctx.config).unwrap();
    let pool = pseudo_label(&ctx.world, &unlabeled).unwrap();
    let upl = UplConfig {
        k_per_class: 6,
        ensemble_size: 2,
        ..UplConfig::default()
    };
    let top = select_samples(&pool, &unlabeled, 4, 6, Selection::Topk, 0).unwrap();
    assert!(top.data.len() <= 24);
    let models = train_ensemble(&ctx.world, &top.data, &upl, &short()).unwrap();
    assert_eq!(models.len(), 2);
    let acc = ensemble_accuracy(&models, &ctx.world, &ctx.test).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
