mod common;

use rcr::formats::*;
use rcr::pipeline::{self, load_model_dir};
use rcr_core::constraint::{PairBuffer, PairSample};
use rcr_core::numkit::{ParamSet, Tensor};
use rcr_core::trainer::{EpisodeMetrics, MetricsLog};
use rcr_core::user_sim::{FeedbackEvent, Slot};

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut p = ParamSet::new();
    let awkward = vec![0.1 + 0.2, -1e-300, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0, 123456789.123456789];
    p.add("policy.w", Tensor::matrix(2, 3, awkward.clone()).unwrap()).unwrap();
    p.add("policy.b", Tensor::vector(vec![7.5])).unwrap();
    p.add("tracker.h", Tensor::zeros(&[4])).unwrap();
    let back = checkpoint_from_str(&checkpoint_to_string(&p)).unwrap();
    let a: Vec<_> = p.entries().collect();
    let b: Vec<_> = back.entries().collect();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
}

#[test]
fn checkpoint_groups_sections_by_prefix() {
    let mut p = ParamSet::new();
    p.add("text_encoder.a", Tensor::scalar(1.0)).unwrap();
    p.add("text_encoder.b", Tensor::scalar(2.0)).unwrap();
    p.add("policy.c", Tensor::scalar(3.0)).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&checkpoint_to_string(&p)).unwrap();
    let names: Vec<&str> = doc["sections"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["text_encoder", "policy"]);
    assert_eq!(doc["format_version"], 1);
}

#[test]
fn malformed_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(&path, "{\"format_version\": 1, \"sections\": [{\"name\": \"p\", \"params\": [{\"name\": \"p.x\", \"shape\": [2], \"values\": [1.0]}]}]}").unwrap();
    assert_eq!(read_checkpoint(&path).unwrap_err().exit_code(), 3);
    std::fs::write(&path, "{\"format_version\": 9, \"sections\": []}").unwrap();
    assert_eq!(read_checkpoint(&path).unwrap_err().exit_code(), 3);
}

#[test]
fn catalog_round_trip_keeps_items_and_predictions() {
    let cfg = common::tiny_config();
    let (catalog, _) = pipeline::prepare(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_catalog(&path, &catalog).unwrap();
    let back = read_catalog(&path).unwrap();
    assert_eq!(back.items(), catalog.items());
    assert_eq!(back.schema(), catalog.schema());
    for id in 0..catalog.len() {
        assert_eq!(back.retrieval_attrs(id), catalog.retrieval_attrs(id));
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), catalog.len() + 1);
}

#[test]
fn catalog_with_bad_attribute_is_rejected() {
    let cfg = common::tiny_config();
    let (catalog, _) = pipeline::prepare(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_catalog(&path, &catalog).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    rec["attrs"][0] = serde_json::json!(99);
    lines[1] = rec.to_string();
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(read_catalog(&path).is_err());
}

#[test]
fn templates_round_trip() {
    let cfg = common::tiny_config();
    let (catalog, sim) = pipeline::prepare(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    write_templates(&path, sim.templates(), catalog.schema()).unwrap();
    assert_eq!(read_templates(&path, catalog.schema()).unwrap(), sim.templates());
}

#[test]
fn buffer_round_trip() {
    let mut buf = PairBuffer::new(3);
    for i in 0..5 {
        buf.push(PairSample {
            history: vec![FeedbackEvent {
                template: i,
                slot: Slot { attr: 1, value: i },
            }],
            item: i,
            attrs: vec![0, i, 0, 0, 0, 0],
            retrieval_attrs: vec![0, i, 0, 0, 0, 0],
            embedding: vec![i as f64 * 0.1; 3],
            violations: i % 2,
        });
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.jsonl");
    write_buffer(&path, &buf).unwrap();
    assert_eq!(read_buffer(&path).unwrap(), buf);
}

#[test]
fn metrics_round_trip() {
    let rows = (0..4)
        .map(|i| EpisodeMetrics {
            episode: i,
            steps: 3 + i,
            success: i % 2 == 0,
            nv: i * 2,
            lambda: 0.1 * i as f64,
            mean_reward: -1.0 / 3.0,
            mean_penalty: 0.7,
            disc_loss: if i == 0 { None } else { Some(1.0 / 7.0) },
        })
        .collect();
    let log = MetricsLog { rows };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics(&path, &log).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), log);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("episode,steps,success,nv,lambda,mean_reward,mean_penalty,disc_loss\n"));
}

#[test]
fn model_dir_reloads_to_the_same_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_model_dir(dir.path());
    let (catalog, sim) = pipeline::prepare(&cfg).unwrap();
    let out = pipeline::train(&cfg, &catalog, &sim).unwrap();
    let m = load_model_dir(dir.path()).unwrap();
    assert_eq!(m.config, cfg);
    let values = |p: &ParamSet| p.entries().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>();
    assert_eq!(values(&m.model.params), values(&out.model.params));
    assert_eq!(values(&m.discriminator.unwrap().params), values(&out.discriminator.unwrap().params));
    let s = m.model.initial_state();
    assert_eq!(m.model.action_distribution(&s).unwrap(), out.model.action_distribution(&s).unwrap());
}
