//! Task generation, expert training, checkpoints and presets end to end.

use std::sync::OnceLock;

use proptest::prelude::*;

use ttmoe_core::checkpoint::{load_bank, load_expert, save_bank, save_expert};
use ttmoe_core::config::ExperimentConfig;
use ttmoe_core::data::{build_mixed, gen_synthetic_tasks, Split, TaskDataset, TaskGenConfig};
use ttmoe_core::model::{adapter_param_count, count_trainable, AdapterSpec, BaseModel, ExpertAdapter, ModelConfig};
use ttmoe_core::router::{router_param_count, ExpertBank};
use ttmoe_core::train::{evaluate, train_expert, TrainConfig, TrainReport};
use ttmoe_core::Error;

fn base() -> &'static BaseModel {
    static BASE: OnceLock<BaseModel> = OnceLock::new();
    BASE.get_or_init(|| BaseModel::new(ModelConfig::default()).unwrap())
}

fn tasks() -> &'static Vec<TaskDataset> {
    static TASKS: OnceLock<Vec<TaskDataset>> = OnceLock::new();
    TASKS.get_or_init(|| gen_synthetic_tasks(base(), 3, 11, &TaskGenConfig::default()).unwrap())
}

fn trained() -> &'static Vec<(ExpertAdapter, TrainReport)> {
    static TRAINED: OnceLock<Vec<(ExpertAdapter, TrainReport)>> = OnceLock::new();
    TRAINED.get_or_init(|| {
        tasks()
            .iter()
            .enumerate()
            .map(|(i, t)| train_expert(base(), t, &TrainConfig::default(), i as u32).unwrap())
            .collect()
    })
}

fn preset(name: &str) -> ExperimentConfig {
    let path = format!("{}/../../presets/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    ExperimentConfig::load(path).unwrap()
}

#[test]
fn band_widths_follow_task_count() {
    let gen = TaskGenConfig::default();
    let one = gen_synthetic_tasks(base(), 1, 0, &gen).unwrap();
    assert_eq!(one[0].band_width, 16);
    let four = gen_synthetic_tasks(base(), 4, 0, &gen).unwrap();
    for (i, t) in four.iter().enumerate() {
        assert_eq!((t.band_start, t.band_width), (16 * i as u32, 16));
    }
    let six = tasks_for(6);
    assert!(six.iter().all(|t| t.band_width == 10));
}

fn tasks_for(n: usize) -> Vec<TaskDataset> {
    gen_synthetic_tasks(base(), n, 1, &TaskGenConfig::default()).unwrap()
}

#[test]
fn generated_tasks_stay_in_band_and_pass_the_probe() {
    for t in tasks() {
        t.validate().unwrap();
        assert!(t.probe_accuracy >= 0.9, "{} probe {}", t.name, t.probe_accuracy);
        for i in 0..t.tokens.len() {
            let seq = t.tokens.sequence(i);
            assert!(seq.iter().all(|&tok| tok >= t.band_start && tok < t.band_start + t.band_width as u32));
            assert_eq!(t.labels[i], t.rule.label(seq, t.band_start, t.band_width));
        }
    }
}

#[test]
fn generation_is_reproducible_from_the_seed() {
    let a = gen_synthetic_tasks(base(), 3, 11, &TaskGenConfig::default()).unwrap();
    assert_eq!(&a, tasks());
    let b = gen_synthetic_tasks(base(), 3, 12, &TaskGenConfig::default()).unwrap();
    assert_ne!(a[0].tokens, b[0].tokens);
}

#[test]
fn mixed_corpus_takes_equal_shares() {
    // 100 and 60 examples: 60 from each, tagged by source
    let mut big = tasks()[0].clone();
    let mut small = tasks()[1].clone();
    big.train.truncate(100);
    small.train.truncate(60);
    let mixed = build_mixed(&[big, small], None, Split::Train, 3).unwrap();
    assert_eq!(mixed.len(), 120);
    assert_eq!(mixed.per_task, 60);
    for t in 0..2 {
        assert_eq!(mixed.examples.iter().filter(|e| e.task == t).count(), 60);
    }
    assert!(build_mixed(tasks(), Some(1000), Split::Train, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mixed_is_a_shuffled_multiset_of_the_sources(per_task in 1usize..64, seed in any::<u64>()) {
        let mixed = build_mixed(tasks(), Some(per_task), Split::Validation, seed).unwrap();
        prop_assert_eq!(mixed.len(), per_task * tasks().len());
        let mut got: Vec<(usize, Vec<u32>, usize)> =
            mixed.examples.iter().map(|e| (e.task, e.tokens.clone(), e.label)).collect();
        let mut want: Vec<(usize, Vec<u32>, usize)> = tasks()
            .iter()
            .enumerate()
            .flat_map(|(t, task)| {
                task.validation[..per_task]
                    .iter()
                    .map(move |&i| (t, task.tokens.sequence(i).to_vec(), task.labels[i]))
            })
            .collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
        let again = build_mixed(tasks(), Some(per_task), Split::Validation, seed).unwrap();
        prop_assert_eq!(&again, &mixed);
    }
}

#[test]
fn experts_learn_their_tasks() {
    for (adapter, report) in trained() {
        assert!(
            report.best_val_accuracy >= 0.95,
            "{}: {}",
            report.task,
            report.best_val_accuracy
        );
        assert_eq!(report.val_accuracy.len(), report.epochs_run + 1);
        assert_eq!(report.train_loss.len(), report.epochs_run);
        assert!(report.epochs_run <= report.best_epoch + TrainConfig::default().patience);
        let task = tasks().iter().find(|t| t.name == report.task).unwrap();
        assert_eq!(evaluate(base(), adapter, task, Split::Validation).unwrap(), report.best_val_accuracy);
    }
}

#[test]
fn lora_experts_learn_too() {
    let (_, report) = train_expert(base(), &tasks()[0], &TrainConfig::lora(), 0).unwrap();
    assert!(report.best_val_accuracy >= 0.95, "{}", report.best_val_accuracy);
}

#[test]
fn zero_epochs_returns_the_fresh_adapter() {
    let config = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let task = &tasks()[0];
    let (adapter, report) = train_expert(base(), task, &config, 0).unwrap();
    let fresh = ExpertAdapter::<f32>::new(base().config(), &config.adapter, 0, task.name.clone(), 2, config.seed).unwrap();
    assert_eq!(adapter.trainable_hash(), fresh.trainable_hash());
    assert_eq!((report.epochs_run, report.best_epoch), (0, 0));
    assert_eq!(report.val_accuracy.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let config = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let task = &tasks()[1];
    let (a, ra) = train_expert(base(), task, &config, 1).unwrap();
    let (b, rb) = train_expert(base(), task, &config, 1).unwrap();
    assert_eq!(a.trainable_hash(), b.trainable_hash());
    assert_eq!(ra.train_loss, rb.train_loss);
    assert_eq!(ra.val_accuracy, rb.val_accuracy);
}

#[test]
fn only_adapter_cores_are_trainable() {
    let (adapter, report) = &trained()[0];
    let config = base().config();
    let expected = adapter_param_count(config, &AdapterSpec::toy_tt()).unwrap();
    assert_eq!(count_trainable(adapter), expected);
    assert_eq!(report.trainable_params, expected);
    let fresh =
        ExpertAdapter::<f32>::new(config, &AdapterSpec::toy_tt(), 0, adapter.task_name.clone(), 2, 0).unwrap();
    assert_eq!(adapter.head_hash(), fresh.head_hash());
    assert_ne!(adapter.trainable_hash(), fresh.trainable_hash());
}

#[test]
fn evaluate_rejects_mismatched_heads() {
    let adapter = ExpertAdapter::<f32>::new(base().config(), &AdapterSpec::toy_tt(), 0, "three", 3, 0).unwrap();
    assert!(evaluate(base(), &adapter, &tasks()[0], Split::Validation).is_err());
}

#[test]
fn trained_expert_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (adapter, _) = &trained()[2];
    let path = dir.path().join("expert.ttx");
    save_expert(&path, adapter).unwrap();
    let back = load_expert::<f32>(&path, Some(base().config_hash())).unwrap();
    assert_eq!(&back, adapter);
    let task = &tasks()[2];
    assert_eq!(
        evaluate(base(), &back, task, Split::Validation).unwrap(),
        evaluate(base(), adapter, task, Split::Validation).unwrap()
    );
    assert!(matches!(
        load_expert::<f32>(&path, Some(base().config_hash() ^ 1)),
        Err(Error::ConfigHash { .. })
    ));
    assert!(matches!(load_expert::<f64>(&path, None), Err(Error::Precision { .. })));
}

#[test]
fn bank_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bank = ExpertBank::new(trained().iter().map(|(a, _)| a.clone()).collect()).unwrap();
    let manifest = save_bank(dir.path(), &bank).unwrap();
    let back = load_bank::<f32>(&manifest, base().config_hash()).unwrap();
    assert_eq!(back.table(), bank.table());
    assert_eq!(back.experts(), bank.experts());
}

#[test]
fn presets_parse_and_count() {
    for name in ["toy-tt", "toy-lora", "paper-tt", "paper-lora"] {
        preset(name).validate().unwrap();
    }
    let tt = preset("paper-tt");
    assert_eq!(adapter_param_count(&tt.model, &tt.train.adapter).unwrap(), 33_920);
    let lora = preset("paper-lora");
    assert_eq!(adapter_param_count(&lora.model, &lora.train.adapter).unwrap(), 1_703_936);
    assert_eq!(router_param_count(tt.model.d_model, 17), 69_649);
    let toy = preset("toy-tt");
    assert_eq!(toy.model, ModelConfig::default());
}
