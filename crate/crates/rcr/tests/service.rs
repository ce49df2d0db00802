mod common;

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rcr::pipeline::load_model_dir;
use rcr::service::router;
use rcr::session::*;
use rcr_core::user_sim::{count_violations, Feedback, Slot};
use serde_json::{json, Value};
use tower::ServiceExt;

fn model_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("service-model");
        common::tiny_model_dir(&dir);
        dir
    })
}

fn engine(store: Option<SessionStore>) -> Engine {
    Engine::new(vec![load_model_dir(model_dir()).unwrap()], store).unwrap()
}

fn demo(seed: u64) -> CreateRequest {
    CreateRequest {
        demo: true,
        seed,
        ..CreateRequest::default()
    }
}

/// Feedback the simulator would give about the session's last item.
fn simulated(e: &Engine, id: &str, rng: &mut rand_chacha::ChaCha8Rng) -> FeedbackRequest {
    let m = load_model_dir(model_dir()).unwrap();
    let s = e.snapshot(id).unwrap();
    let goal = s.goal.clone().unwrap();
    let item = s.last_items().unwrap()[0].id;
    match m.sim.give_feedback(&m.catalog.item(item).attrs, &goal, rng) {
        Feedback::Satisfied => FeedbackRequest {
            satisfied: true,
            ..FeedbackRequest::default()
        },
        Feedback::Comment(u) => FeedbackRequest {
            template: Some(u.template),
            attribute: Some(Ref::Index(u.slot.attr)),
            value: Some(Ref::Index(u.slot.value)),
            ..FeedbackRequest::default()
        },
    }
}

fn play(e: &Engine, id: &str, turns: usize, seed: u64) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..turns {
        if e.snapshot(id).unwrap().status != Status::Active {
            break;
        }
        let req = simulated(e, id, &mut rng);
        e.feedback(id, &req).unwrap();
    }
}

#[test]
fn first_recommendation_is_reproducible() {
    let a = engine(None).create(&CreateRequest::default()).unwrap();
    let b = engine(None).create(&CreateRequest::default()).unwrap();
    assert_eq!(a.turn, 1);
    assert_ne!(a.session, b.session);
    assert_eq!(a.recommendation, b.recommendation);
}

#[test]
fn replaying_a_transcript_gives_identical_recommendations() {
    let e = engine(None);
    let a = e.create(&demo(5)).unwrap().session;
    play(&e, &a, 8, 1);
    let b = e.create(&demo(5)).unwrap().session;
    for entry in e.snapshot(&a).unwrap().transcript {
        let req = match entry {
            TranscriptEntry::Feedback {
                template, attribute, value, ..
            } => FeedbackRequest {
                template: Some(template),
                attribute: Some(Ref::Name(attribute)),
                value: Some(Ref::Name(value)),
                ..FeedbackRequest::default()
            },
            TranscriptEntry::Satisfied { .. } => FeedbackRequest {
                satisfied: true,
                ..FeedbackRequest::default()
            },
            TranscriptEntry::Recommendation { .. } => continue,
        };
        e.feedback(&b, &req).unwrap();
    }
    let (sa, sb) = (e.snapshot(&a).unwrap(), e.snapshot(&b).unwrap());
    assert_eq!(sa.transcript, sb.transcript);
    assert_eq!(sa.s, sb.s);
    assert_eq!(sa.status, sb.status);
}

#[test]
fn raw_text_maps_to_the_structured_equivalent() {
    let e = engine(None);
    let m = load_model_dir(model_dir()).unwrap();
    let slot = Slot { attr: 0, value: 1 };
    let template = m.sim.templates().iter().find(|t| t.applies_to(0)).unwrap().id;
    let text = m.sim.utterance(template, slot).unwrap().text();

    let a = e.create(&CreateRequest::default()).unwrap().session;
    let b = e.create(&CreateRequest::default()).unwrap().session;
    let ra = e
        .feedback(
            &a,
            &FeedbackRequest {
                text: Some(text.to_uppercase()),
                ..FeedbackRequest::default()
            },
        )
        .unwrap();
    let rb = e
        .feedback(
            &b,
            &FeedbackRequest {
                template: Some(template),
                attribute: Some(Ref::Index(0)),
                value: Some(Ref::Index(1)),
                ..FeedbackRequest::default()
            },
        )
        .unwrap();
    assert_eq!(ra.recommendation, rb.recommendation);
    assert_eq!(e.snapshot(&a).unwrap().history, e.snapshot(&b).unwrap().history);
}

#[test]
fn out_of_vocabulary_text_falls_back_to_the_nearest_template() {
    let e = engine(None);
    let m = load_model_dir(model_dir()).unwrap();
    let name = m.catalog.schema().value_name(0, 2).to_string();
    let id = e.create(&CreateRequest::default()).unwrap().session;
    let r = e.feedback(
        &id,
        &FeedbackRequest {
            text: Some(format!("zorbly show me {name} wibble")),
            ..FeedbackRequest::default()
        },
    );
    assert!(r.is_ok(), "{r:?}");
    let s = e.snapshot(&id).unwrap();
    assert_eq!(s.history[0].slot, Slot { attr: 0, value: 2 });
    assert!(m.sim.templates()[s.history[0].template].applies_to(0));
}

#[test]
fn summary_nv_equals_the_oracle_replay() {
    let e = engine(None);
    let m = load_model_dir(model_dir()).unwrap();
    let schema = m.catalog.schema();
    for seed in 0..3 {
        let id = e.create(&demo(seed)).unwrap().session;
        play(&e, &id, 12, seed + 10);
        let s = e.snapshot(&id).unwrap();
        let mut slots: Vec<Slot> = Vec::new();
        let mut nv = 0;
        for entry in &s.transcript {
            match entry {
                TranscriptEntry::Recommendation { items, .. } => {
                    nv += items.iter().map(|c| count_violations(&m.catalog.item(c.id).attrs, &slots)).sum::<usize>();
                }
                TranscriptEntry::Feedback { attribute, value, .. } => {
                    let attr = schema.names().iter().position(|n| n == attribute).unwrap();
                    let value = schema.value_names(attr).iter().position(|v| v == value).unwrap();
                    slots.push(Slot { attr, value });
                }
                TranscriptEntry::Satisfied { .. } => {}
            }
        }
        assert_eq!(e.end(&id).unwrap().nv, Some(nv));
    }
}

#[test]
fn free_play_sessions_report_no_oracle_counts() {
    let e = engine(None);
    let id = e.create(&CreateRequest::default()).unwrap().session;
    let summary = e.end(&id).unwrap();
    assert_eq!(summary.nv, None);
    assert_eq!(summary.status, Status::Abandoned);
}

#[test]
fn sessions_cap_at_the_step_budget() {
    let e = engine(None);
    let m = load_model_dir(model_dir()).unwrap();
    let id = e.create(&CreateRequest::default()).unwrap().session;
    // keep asking for a value no item will match on every attribute in turn
    let mut turns = 1;
    while e.snapshot(&id).unwrap().status == Status::Active {
        let attr = turns % m.catalog.schema().num_attributes();
        let template = m.sim.templates().iter().find(|t| t.applies_to(attr)).unwrap().id;
        e.feedback(
            &id,
            &FeedbackRequest {
                template: Some(template),
                attribute: Some(Ref::Index(attr)),
                value: Some(Ref::Index(0)),
                ..FeedbackRequest::default()
            },
        )
        .unwrap();
        turns += 1;
    }
    let s = e.snapshot(&id).unwrap();
    assert_eq!(s.status, Status::Capped);
    assert_eq!(s.turn, m.config.max_steps);
    assert!(matches!(
        e.feedback(
            &id,
            &FeedbackRequest {
                satisfied: true,
                ..FeedbackRequest::default()
            }
        ),
        Err(SessionError::Inactive(..))
    ));
}

#[test]
fn satisfied_feedback_closes_the_session() {
    let e = engine(None);
    let id = e.create(&CreateRequest::default()).unwrap().session;
    let r = e
        .feedback(
            &id,
            &FeedbackRequest {
                satisfied: true,
                ..FeedbackRequest::default()
            },
        )
        .unwrap();
    assert_eq!(r.status, Status::Succeeded);
    assert!(r.recommendation.is_none());
    assert_eq!(e.end(&id).unwrap().status, Status::Succeeded);
}

#[test]
fn rejected_feedback_leaves_the_session_untouched() {
    let e = engine(None);
    let id = e.create(&CreateRequest::default()).unwrap().session;
    let before = e.snapshot(&id).unwrap();
    let bad = FeedbackRequest {
        template: Some(0),
        attribute: Some(Ref::Name("no such attribute".into())),
        value: Some(Ref::Index(0)),
        ..FeedbackRequest::default()
    };
    assert!(matches!(e.feedback(&id, &bad), Err(SessionError::BadRequest(_))));
    assert_eq!(e.snapshot(&id).unwrap(), before);
}

#[test]
fn restored_sessions_continue_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let live = engine(Some(SessionStore::open(dir.path()).unwrap()));
    let id = live.create(&demo(2)).unwrap().session;
    play(&live, &id, 4, 3);

    let restored = engine(Some(SessionStore::open(dir.path()).unwrap()));
    assert_eq!(restored.snapshot(&id).unwrap(), live.snapshot(&id).unwrap());
    play(&live, &id, 4, 4);
    play(&restored, &id, 4, 4);
    let (a, b) = (live.snapshot(&id).unwrap(), restored.snapshot(&id).unwrap());
    assert_eq!(a.transcript, b.transcript);
    assert_eq!(a.s, b.s);
}

#[test]
fn concurrent_sessions_do_not_interfere() {
    let e = Arc::new(engine(None));
    let ids: Vec<String> = (0..4).map(|s| e.create(&demo(s)).unwrap().session).collect();
    std::thread::scope(|scope| {
        for (i, id) in ids.iter().enumerate() {
            let e = Arc::clone(&e);
            scope.spawn(move || play(&e, id, 6, i as u64));
        }
    });
    let serial = engine(None);
    for (i, id) in ids.iter().enumerate() {
        let s = serial.create(&demo(i as u64)).unwrap().session;
        play(&serial, &s, 6, i as u64);
        assert_eq!(serial.snapshot(&s).unwrap().transcript, e.snapshot(id).unwrap().transcript);
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn http_session_lifecycle() {
    let app = router(Arc::new(engine(None)));
    let (st, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((st, body["status"].as_str()), (StatusCode::OK, Some("ok")));

    let (st, models) = call(&app, "GET", "/models", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(models[0]["id"], "service-model");
    assert_eq!(models[0]["attributes"].as_array().unwrap().len(), 6);

    let (st, created) = call(&app, "POST", "/sessions", Some(json!({"k": 3, "demo": true, "seed": 1}))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(created["turn"], 1);
    assert_eq!(created["recommendation"]["items"].as_array().unwrap().len(), 3);
    let id = created["session"].as_str().unwrap().to_string();

    let fb = json!({"template": 0, "attribute": 0, "value": 1});
    let (st, next) = call(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb)).await;
    assert_eq!(st, StatusCode::OK, "{next}");
    assert_eq!(next["turn"], 2);

    let (st, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(view["turn"], 2);
    assert_eq!(view["transcript"].as_array().unwrap().len(), 3);
    assert_eq!(view["goal_registered"], true);
    assert!(view.get("goal").is_none());

    let (st, summary) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(summary["status"], "abandoned");
    assert!(summary["nv"].is_u64());

    let (st, err) = call(&app, "POST", &format!("/sessions/{id}/feedback"), Some(json!({"satisfied": true}))).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::CONFLICT, Some("inactive_session")));
}

#[tokio::test]
async fn http_errors_are_machine_readable() {
    let app = router(Arc::new(engine(None)));
    let (st, err) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));

    let (st, err) = call(&app, "POST", "/sessions", Some(json!({"model": "missing"}))).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_model")));

    let (st, err) = call(&app, "POST", "/sessions", Some(json!({"k": 0}))).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));

    let (_, created) = call(&app, "POST", "/sessions", Some(json!({}))).await;
    let id = created["session"].as_str().unwrap().to_string();
    let uri = format!("/sessions/{id}/feedback");

    let (st, err) = call(&app, "POST", &uri, Some(json!({"text": "qwerty asdf"}))).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("unmappable_feedback")));
    assert!(err["message"].as_str().unwrap().contains("qwerty"));

    let (st, err) = call(&app, "POST", &uri, Some(json!({"colour": "red"}))).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));

    let (st, err) = call(&app, "POST", &uri, Some(json!({"template": 0}))).await;
    assert_eq!((st, err["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
}
