//! Routed inference and router training over a small trained bank.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ttmoe_core::checkpoint::{load_router, save_router};
use ttmoe_core::data::{build_mixed, gen_synthetic_tasks, Split, TaskDataset, TaskGenConfig};
use ttmoe_core::model::{BaseModel, ExpertAdapter, ModelConfig};
use ttmoe_core::router::{moe_forward, train_router, ExpertBank, GateMode, RouterConfig, RouterParams};
use ttmoe_core::train::{train_expert, TrainConfig};

struct Fixture {
    base: BaseModel,
    tasks: Vec<TaskDataset>,
    experts: Vec<ExpertAdapter>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let base = BaseModel::new(ModelConfig::default()).unwrap();
        let tasks = gen_synthetic_tasks(&base, 3, 5, &TaskGenConfig::default()).unwrap();
        let config = TrainConfig {
            max_epochs: 8,
            ..TrainConfig::default()
        };
        let experts = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| train_expert(&base, t, &config, i as u32).unwrap().0)
            .collect();
        Fixture { base, tasks, experts }
    })
}

fn bank() -> ExpertBank {
    ExpertBank::new(fixture().experts.clone()).unwrap()
}

fn short_router() -> RouterConfig {
    RouterConfig {
        max_epochs: 6,
        ..RouterConfig::default()
    }
}

#[test]
fn single_expert_bank_is_the_standalone_expert() {
    let f = fixture();
    let bank = ExpertBank::new(vec![f.experts[0].clone()]).unwrap();
    let params = RouterParams::init(f.base.config().d_model, 1, 3);
    let (batch, _) = f.tasks[0].split(Split::Validation);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [GateMode::Eval, GateMode::Train] {
        let moe = moe_forward(&batch, &f.base, &bank, &params, mode, &mut rng).unwrap();
        let alone = f.base.forward(&batch, Some(&f.experts[0])).unwrap().logits.unwrap();
        for r in 0..batch.len() {
            assert_eq!(moe.decisions[r].selected, 0);
            assert_eq!(moe.logits[r].as_slice(), alone.row(r));
        }
    }
}

#[test]
fn a_dominant_bias_forces_the_route() {
    let f = fixture();
    let bank = bank();
    let (batch, _) = f.tasks[0].split(Split::Validation);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for forced in 0..bank.len() {
        let mut params = RouterParams::init(f.base.config().d_model, bank.len(), 9);
        params.b_gate.data_mut()[forced] = 1000.0;
        let moe = moe_forward(&batch, &f.base, &bank, &params, GateMode::Eval, &mut rng).unwrap();
        assert!(moe.decisions.iter().all(|d| d.selected == forced));
        let alone = f.base.forward(&batch, Some(bank.get(forced))).unwrap().logits.unwrap();
        for r in 0..batch.len() {
            assert_eq!(moe.logits[r].as_slice(), alone.row(r));
        }
    }
}

#[test]
fn eval_routing_ignores_the_rng() {
    let f = fixture();
    let bank = bank();
    let params = RouterParams::init(f.base.config().d_model, bank.len(), 2);
    let (batch, _) = f.tasks[1].split(Split::Validation);
    let a = moe_forward(&batch, &f.base, &bank, &params, GateMode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = moe_forward(&batch, &f.base, &bank, &params, GateMode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.predictions(), b.predictions());
}

#[test]
fn mismatched_router_width_is_rejected() {
    let f = fixture();
    let params = RouterParams::init(f.base.config().d_model, 2, 0);
    let (batch, _) = f.tasks[0].split(Split::Validation);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(moe_forward(&batch, &f.base, &bank(), &params, GateMode::Eval, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shifting_every_bias_keeps_the_routes(shift in -50.0f32..50.0, seed in 0u64..1000) {
        let f = fixture();
        let bank = bank();
        let params = RouterParams::init(f.base.config().d_model, bank.len(), seed);
        let mut shifted = params.clone();
        for b in shifted.b_gate.data_mut() {
            *b += shift;
        }
        let (batch, _) = f.tasks[2].split(Split::Validation);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = moe_forward(&batch, &f.base, &bank, &params, GateMode::Eval, &mut rng).unwrap();
        let b = moe_forward(&batch, &f.base, &bank, &shifted, GateMode::Eval, &mut rng).unwrap();
        let sel = |o: &ttmoe_core::router::MoeOutput<f32>| o.decisions.iter().map(|d| d.selected).collect::<Vec<_>>();
        prop_assert_eq!(sel(&a), sel(&b));
    }
}

#[test]
fn router_training_is_reproducible_and_round_trips() {
    let f = fixture();
    let bank = bank();
    let train = build_mixed(&f.tasks, None, Split::Train, 4).unwrap();
    let eval = build_mixed(&f.tasks, None, Split::Validation, 5).unwrap();
    let (a, ra) = train_router(&f.base, &bank, &train, &eval, &short_router()).unwrap();
    let (b, rb) = train_router(&f.base, &bank, &train, &eval, &short_router()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.routing_accuracy, rb.routing_accuracy);
    assert_eq!(ra.train_total_loss, rb.train_total_loss);
    assert_eq!(ra.routing_accuracy.len(), ra.epochs_run + 1);
    assert!(ra.best_routing_accuracy >= ra.routing_accuracy[0]);
    assert_eq!(a.experts, bank.table());
    for ((total, task), router) in ra.train_total_loss.iter().zip(&ra.train_task_loss).zip(&ra.train_router_loss) {
        assert!((total - (task + ra.lambda * router)).abs() < 1e-6 * total.abs().max(1.0));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("router.ttr");
    save_router(&path, &a).unwrap();
    assert_eq!(load_router::<f32>(&path).unwrap(), a);
}

#[test]
fn router_seed_changes_the_run() {
    let f = fixture();
    let bank = bank();
    let train = build_mixed(&f.tasks, None, Split::Train, 4).unwrap();
    let eval = build_mixed(&f.tasks, None, Split::Validation, 5).unwrap();
    let other = RouterConfig {
        seed: 99,
        max_epochs: 1,
        ..short_router()
    };
    let base = RouterConfig {
        max_epochs: 1,
        ..short_router()
    };
    let (a, _) = train_router(&f.base, &bank, &train, &eval, &base).unwrap();
    let (b, _) = train_router(&f.base, &bank, &train, &eval, &other).unwrap();
    assert_ne!(a.params, b.params);
}
