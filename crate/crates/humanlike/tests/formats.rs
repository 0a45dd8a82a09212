use std::fs;
use std::path::Path;

use humanlike::checkpoint::{load_adapters, load_model, save_adapters, save_model};
use humanlike::jsonl::{read_jsonl, read_records, write_records, JsonlAppender};
use humanlike::metrics::{read_merged, read_metrics, render_merged, render_metrics, write_merged, write_metrics};
use humanlike::{Config, Error};
use humanlike_core::data::PreferenceRecord;
use humanlike_core::lm::{LanguageModel, ModelConfig};
use humanlike_core::lora::LoraConfig;
use humanlike_core::train::{MetricsLog, MetricsRow};

fn records(n: usize) -> Vec<PreferenceRecord> {
    (0..n)
        .map(|i| {
            let mut r = PreferenceRecord::new(
                format!("Question {i}: what do you think of \"tea\"?"),
                format!("Oh, tea is great! 🍵 #{i}"),
                format!("Tea is a beverage.\nItem {i}."),
            );
            if i % 3 == 0 {
                r.topic = Some("daily life".into());
            }
            r
        })
        .collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        embed_dim: 8,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

fn row(step: usize, margin: f64) -> MetricsRow {
    MetricsRow {
        step,
        loss: 0.69 - margin / 10.0,
        margin,
        chosen_reward: margin / 2.0,
        rejected_reward: -margin / 2.0,
        accuracy: 0.75,
        lr: 2e-4 * step as f64 / 10.0,
    }
}

fn log(run: &str, steps: impl IntoIterator<Item = usize>) -> MetricsLog {
    let mut log = MetricsLog::new(run);
    for s in steps {
        log.push(row(s, s as f64 * 0.013 + 1.0 / 3.0)).unwrap();
    }
    log
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn dataset_round_trip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let original = records(10);
    write_records(&path, &original).unwrap();
    assert_eq!(read_records(&path).unwrap(), original);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.starts_with('{') && l.ends_with('}')));
}

#[test]
fn missing_key_names_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "bad.jsonl", "{\"prompt\":\"x\"}\n");
    let err = read_records(&path).unwrap_err();
    assert!(matches!(err, Error::Line { line: 1, .. }));
    assert!(err.to_string().ends_with("line 1: missing chosen"), "{err}");
}

#[test]
fn reader_reports_later_lines_and_bad_types() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"prompt":"a","chosen":"b","rejected":"c"}"#;
    let path = write(
        dir.path(),
        "d.jsonl",
        &format!("{good}\n\n{good}\n{{\"prompt\":\"a\",\"chosen\":1,\"rejected\":\"c\"}}\n"),
    );
    let err = read_records(&path).unwrap_err().to_string();
    assert!(err.ends_with("line 4: chosen is not a string"), "{err}");

    let path = write(dir.path(), "e.jsonl", "{not json\n");
    assert!(read_records(&path).unwrap_err().to_string().contains("line 1:"));

    let path = write(
        dir.path(),
        "f.jsonl",
        r#"{"prompt":"a","chosen":"same","rejected":"same"}"#,
    );
    assert!(read_records(&path).unwrap_err().to_string().contains("line 1:"));
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "empty.jsonl", "");
    assert!(read_records(&path).unwrap().is_empty());
}

#[test]
fn missing_file_is_an_io_error_naming_the_path() {
    let err = read_records("/nonexistent/data.jsonl").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/data.jsonl"));
}

#[test]
fn writer_refuses_invalid_records() {
    let dir = tempfile::tempdir().unwrap();
    let bad = PreferenceRecord::new("", "a", "b");
    assert!(write_records(dir.path().join("x.jsonl"), &[bad]).is_err());
}

#[test]
fn appender_appends_across_reopens() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    {
        let mut a = JsonlAppender::open(&path).unwrap();
        a.append(&serde_json::json!({"n": 1})).unwrap();
    }
    let mut a = JsonlAppender::open(&path).unwrap();
    a.append(&serde_json::json!({"n": 2})).unwrap();
    let back: Vec<serde_json::Value> = read_jsonl(&path).unwrap();
    assert_eq!(back, vec![serde_json::json!({"n": 1}), serde_json::json!({"n": 2})]);
}

#[test]
fn model_checkpoint_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = LanguageModel::new(tiny_config(), 3).unwrap();
    save_model(&path, &model).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.base_weights(), model.base_weights());
    assert_eq!(back.base_digest(), model.base_digest());
    let ids = [256, 1, 2, 3, 258, 4, 5];
    assert_eq!(back.logits(&ids).unwrap(), model.logits(&ids).unwrap());
}

#[test]
fn model_checkpoint_rejects_wrong_magic_and_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = LanguageModel::new(tiny_config(), 3).unwrap();
    save_model(&path, &model).unwrap();

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["magic"] = "something-else".into();
    let wrong = write(dir.path(), "wrong.json", &v.to_string());
    assert!(load_model(&wrong).unwrap_err().to_string().contains("magic"));

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["config"]["embed_dim"] = 16.into();
    let mismatched = write(dir.path(), "shape.json", &v.to_string());
    assert!(matches!(load_model(&mismatched), Err(Error::Format { .. })));

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["version"] = 99.into();
    let future = write(dir.path(), "future.json", &v.to_string());
    assert!(load_model(&future).unwrap_err().to_string().contains("version"));
}

#[test]
fn adapter_checkpoint_round_trips_and_checks_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lora.json");
    let base = LanguageModel::new(tiny_config(), 5).unwrap();
    let mut tuned = base.clone();
    let lora = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };
    tuned.attach_lora(&lora, 9).unwrap();
    let b_ids: Vec<_> = tuned.adapters().iter().map(|(_, l)| l.adapter.b).collect();
    for (k, id) in b_ids.into_iter().enumerate() {
        for (j, x) in tuned.store_mut().get_mut(id).value.data_mut().iter_mut().enumerate() {
            *x = ((k * 31 + j) % 7) as f64 * 0.01 - 0.03;
        }
    }
    save_adapters(&path, &tuned).unwrap();

    let mut restored = base.clone();
    load_adapters(&path, &mut restored).unwrap();
    let ids = [256, 10, 20, 30, 258, 40];
    assert_eq!(restored.logits(&ids).unwrap(), tuned.logits(&ids).unwrap());

    let mut other = LanguageModel::new(tiny_config(), 6).unwrap();
    let err = load_adapters(&path, &mut other).unwrap_err();
    assert!(err.to_string().contains("trained on base"), "{err}");

    assert!(save_adapters(dir.path().join("none.json"), &base).is_err());
}

#[test]
fn metrics_file_has_header_plus_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let l = log("Human-Like-Toy", 1..=3);
    write_metrics(&l, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(!text.contains('\r'));
    assert!(lines[0].starts_with("Step;Human-Like-Toy - train/rewards/margins;"));
    assert!(lines.iter().all(|l| l.split(';').count() == 8));
    assert!(lines[1].starts_with("1;"));
}

#[test]
fn metrics_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let l = log("run", 1..=25);
    write_metrics(&l, &path).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.run, l.run);
    assert_eq!(back.rows, l.rows);
}

#[test]
fn metrics_refuse_empty_logs_and_bad_names() {
    assert!(render_metrics(&MetricsLog::new("empty")).is_err());
    assert!(render_metrics(&log("a;b", 1..=2)).is_err());
}

#[test]
fn merged_file_takes_the_union_of_steps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("merged.csv");
    let a = log("A", 1..=4);
    let b = log("B", 1..=2);
    write_merged(&[a.clone(), b.clone()], &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "Step;A - train/rewards/margins;B - train/rewards/margins");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].ends_with(';'), "{}", lines[4]);

    let runs = read_merged(&path).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].0, "A");
    assert_eq!(runs[0].1, a.rows.iter().map(|r| (r.step, r.margin)).collect::<Vec<_>>());
    assert_eq!(runs[1].1, b.rows.iter().map(|r| (r.step, r.margin)).collect::<Vec<_>>());

    assert!(render_merged(&[a.clone(), a]).is_err());
    assert!(render_merged(&[]).is_err());
}

#[test]
fn checked_in_config_equals_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    assert_eq!(Config::load(&path).unwrap(), Config::default());
}

#[test]
fn default_config_reproduces_the_published_hyperparameters() {
    let c = Config::default();
    assert_eq!(c.training.learning_rate, 2e-4);
    assert_eq!(c.training.epochs, 1);
    assert_eq!(c.training.warmup_steps, 10);
    assert_eq!(c.training.grad_accumulation, 8);
    assert_eq!(c.training.micro_batch, 2);
    assert_eq!(c.training.beta, 0.1);
    assert_eq!(c.lora.rank, 8);
    assert_eq!(c.lora.alpha, 4.0);
    assert_eq!(c.lora.dropout, 0.05);
}

#[test]
fn unknown_config_key_is_named() {
    let err = Config::from_json(r#"{"training": {"learnig_rate": 0.1}}"#).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("learnig_rate"), "{err}");
    let err = Config::from_json(r#"{"trainer": {}}"#).unwrap_err();
    assert!(err.to_string().contains("trainer"), "{err}");
}

#[test]
fn partial_config_keeps_other_defaults() {
    let c = Config::from_json(r#"{"training": {"beta": 0.5}, "arena": {"port": 9000}}"#).unwrap();
    assert_eq!(c.training.beta, 0.5);
    assert_eq!(c.training.learning_rate, 2e-4);
    assert_eq!(c.arena.port, 9000);
    assert_eq!(c.model, ModelConfig::default());
}

#[test]
fn invalid_values_are_rejected() {
    assert!(Config::from_json(r#"{"model": {"embed_dim": 10, "heads": 4}}"#).is_err());
    assert!(Config::from_json(r#"{"datagen": {"conversational_share": 1.5}}"#).is_err());
}

#[test]
fn reseed_reaches_every_stage() {
    let mut c = Config::default();
    c.reseed(42);
    assert_eq!(
        [c.pretrain.seed, c.training.seed, c.datagen.seed, c.arena.seed],
        [42; 4]
    );
}

#[test]
fn config_keys_are_dotted_with_defaults() {
    let keys = Config::keys("training");
    assert!(keys.contains(&("training.beta".to_string(), "0.1".to_string())));
    assert_eq!(
        Config::keys("datagen.seed"),
        vec![("datagen.seed".to_string(), "0".to_string())]
    );
    assert!(keys.iter().all(|(k, _)| k.starts_with("training.")));
    assert!(Config::keys("nothing").is_empty());
}
