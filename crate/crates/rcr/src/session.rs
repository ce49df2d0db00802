//! Live sessions against a loaded model, with an optional on-disk log.
//!
//! The policy acts greedily, so a session is a pure function of the model
//! and the feedback it receives.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rcr_core::catalog::{Catalog, Split};
use rcr_core::constraint::{hard_filter, history_encoding, HardConstraintTracker};
use rcr_core::recommender::{item_encodings, recommend, GateDecision};
use rcr_core::rng::{self, streams};
use rcr_core::trainer::Mode;
use rcr_core::user_sim::{count_violations, is_success, sample_goal, tokenize, FeedbackEvent, Goal, Slot, UserSimulator};
use serde::{Deserialize, Serialize};

use crate::pipeline::LoadedModel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is {1}")]
    Inactive(String, Status),
    #[error("cannot map feedback: {0}")]
    Unmappable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::UnknownModel(_) => "unknown_model",
            SessionError::UnknownSession(_) => "unknown_session",
            SessionError::Inactive(..) => "inactive_session",
            SessionError::Unmappable(_) => "unmappable_feedback",
            SessionError::BadRequest(_) => "bad_request",
            SessionError::Internal(_) => "internal",
        }
    }
}

impl From<rcr_core::Error> for SessionError {
    fn from(e: rcr_core::Error) -> Self {
        SessionError::Internal(e.to_string())
    }
}

type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Succeeded,
    Capped,
    Abandoned,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Active => "active",
            Status::Succeeded => "succeeded",
            Status::Capped => "capped",
            Status::Abandoned => "abandoned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrLabel {
    pub name: String,
    pub value: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCard {
    pub id: usize,
    pub attrs: Vec<AttrLabel>,
    /// Row of the item embedding in the catalog file.
    pub embedding_id: usize,
    /// Discriminator estimate against the feedback so far.
    pub violation_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Recommendation {
        turn: usize,
        action: Vec<usize>,
        items: Vec<ItemCard>,
        gate: Vec<GateDecision>,
        /// Oracle count against the stated feedback, when a goal is registered.
        violations: Option<usize>,
    },
    Feedback {
        turn: usize,
        template: usize,
        attribute: String,
        value: String,
        text: String,
        raw: Option<String>,
    },
    Satisfied {
        turn: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveSession {
    pub id: String,
    pub model: String,
    pub k: usize,
    pub status: Status,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub goal: Option<Goal>,
    /// Recommendations made so far.
    pub turn: usize,
    pub s: Vec<f64>,
    pub history: Vec<FeedbackEvent>,
    pub text_encodings: Vec<Vec<f64>>,
    pub transcript: Vec<TranscriptEntry>,
}

impl LiveSession {
    pub fn last_items(&self) -> Option<&[ItemCard]> {
        self.transcript.iter().rev().find_map(|e| match e {
            TranscriptEntry::Recommendation { items, .. } => Some(items.as_slice()),
            _ => None,
        })
    }

    /// Summed oracle counts over the transcript (goal sessions only).
    pub fn nv(&self) -> Option<usize> {
        self.goal.as_ref()?;
        Some(
            self.transcript
                .iter()
                .filter_map(|e| match e {
                    TranscriptEntry::Recommendation { violations, .. } => *violations,
                    _ => None,
                })
                .sum(),
        )
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            model: self.model.clone(),
            k: self.k,
            status: self.status,
            turn: self.turn,
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
            goal_registered: self.goal.is_some(),
            transcript: self.transcript.clone(),
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            status: self.status,
            turn: self.turn,
            steps: self.turn,
            nv: self.nv(),
            goal: self.goal.as_ref().map(|g| g.item),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub model: String,
    pub k: usize,
    pub status: Status,
    pub turn: usize,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub goal_registered: bool,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: Status,
    pub turn: usize,
    pub steps: usize,
    pub nv: Option<usize>,
    pub goal: Option<usize>,
}

/// Response to a create or feedback call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session: String,
    pub turn: usize,
    pub status: Status,
    pub recommendation: Option<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ref {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub model: Option<String>,
    pub k: Option<usize>,
    /// Registers this catalog item as the hidden goal.
    pub goal_item: Option<usize>,
    /// Picks a hidden goal from the unseen split with `seed`.
    #[serde(default)]
    pub demo: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub template: Option<usize>,
    pub attribute: Option<Ref>,
    pub value: Option<Ref>,
    pub text: Option<String>,
    #[serde(default)]
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub id: usize,
    pub text: String,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub mode: Mode,
    pub k: usize,
    pub max_steps: usize,
    pub items: usize,
    pub gated: bool,
    pub attributes: Vec<AttributeInfo>,
    pub templates: Vec<TemplateInfo>,
}

struct Runtime {
    loaded: LoadedModel,
    encodings: Vec<Vec<f64>>,
    pool: Vec<usize>,
}

impl Runtime {
    fn new(loaded: LoadedModel) -> Self {
        let encodings = item_encodings(&loaded.catalog);
        let pool = (0..loaded.catalog.len()).collect();
        Self { loaded, encodings, pool }
    }

    fn catalog(&self) -> &Catalog {
        &self.loaded.catalog
    }

    fn sim(&self) -> &UserSimulator {
        &self.loaded.sim
    }

    fn info(&self) -> ModelInfo {
        let schema = self.catalog().schema();
        let cfg = &self.loaded.config;
        ModelInfo {
            id: self.loaded.id.clone(),
            mode: cfg.mode,
            k: cfg.k,
            max_steps: cfg.max_steps,
            items: self.catalog().len(),
            gated: cfg.mode == Mode::Rcr && cfg.gate && self.loaded.discriminator.is_some(),
            attributes: (0..schema.num_attributes())
                .map(|a| AttributeInfo {
                    name: schema.name(a).to_string(),
                    values: schema.value_names(a).to_vec(),
                })
                .collect(),
            templates: self
                .sim()
                .templates()
                .iter()
                .map(|t| TemplateInfo {
                    id: t.id,
                    text: t.tokens.join(" "),
                    attributes: t.attributes.iter().map(|&a| schema.name(a).to_string()).collect(),
                })
                .collect(),
        }
    }

    fn card(&self, id: usize, hist: &[f64]) -> Result<ItemCard> {
        let schema = self.catalog().schema();
        let item = self.catalog().item(id);
        let violation_estimate = match &self.loaded.discriminator {
            Some(d) => Some(d.violation_prob(hist, &self.encodings[id])?),
            None => None,
        };
        Ok(ItemCard {
            id,
            attrs: item
                .attrs
                .iter()
                .enumerate()
                .map(|(a, &v)| AttrLabel {
                    name: schema.name(a).to_string(),
                    value: schema.value_name(a, v).to_string(),
                    index: v,
                })
                .collect(),
            embedding_id: id,
            violation_estimate,
        })
    }

    /// Greedy action from the current state, retrieval, and the turn record.
    fn next_turn(&self, session: &mut LiveSession) -> Result<TranscriptEntry> {
        let cfg = &self.loaded.config;
        let model = &self.loaded.model;
        let action = model.action_distribution(&session.s)?.mode();
        let hist = history_encoding(session.text_encodings.iter().map(Vec::as_slice), model.dims.d_txt);
        let (items, gate) = match (cfg.mode, &self.loaded.discriminator) {
            (Mode::Naive, _) => {
                let mut tracker = HardConstraintTracker::new();
                for e in &session.history {
                    tracker.update(e.slot);
                }
                let r = hard_filter(&tracker, self.catalog(), &action, session.k, &self.pool)?;
                (r.items.iter().map(|n| n.id).collect(), Vec::new())
            }
            (Mode::Rcr, Some(disc)) if cfg.gate => {
                let mut gate = |id: usize| disc.violation_prob(&hist, &self.encodings[id]);
                let r = recommend(&action, self.catalog(), session.k, &self.pool, Some(&mut gate), cfg.alpha, cfg.max_rejects)?;
                (r.items, r.trace)
            }
            _ => (recommend(&action, self.catalog(), session.k, &self.pool, None, cfg.alpha, 0)?.items, Vec::new()),
        };
        let slots: Vec<Slot> = session.history.iter().map(|e| e.slot).collect();
        let violations = session.goal.as_ref().map(|_| {
            items
                .iter()
                .map(|&id: &usize| count_violations(&self.catalog().item(id).attrs, &slots))
                .sum()
        });
        session.turn += 1;
        if let Some(goal) = &session.goal {
            if is_success(self.catalog(), &items, goal) {
                session.status = Status::Succeeded;
            }
        }
        if session.status == Status::Active && session.turn >= cfg.max_steps {
            session.status = Status::Capped;
        }
        let cards = items.iter().map(|&id| self.card(id, &hist)).collect::<Result<_>>()?;
        let entry = TranscriptEntry::Recommendation {
            turn: session.turn,
            action,
            items: cards,
            gate,
            violations,
        };
        session.transcript.push(entry.clone());
        Ok(entry)
    }

    fn resolve_attr(&self, r: &Ref) -> Result<usize> {
        let schema = self.catalog().schema();
        match r {
            Ref::Index(i) if *i < schema.num_attributes() => Ok(*i),
            Ref::Name(n) => schema
                .names()
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| SessionError::BadRequest(format!("unknown attribute `{n}`"))),
            Ref::Index(i) => Err(SessionError::BadRequest(format!("attribute index {i} out of range"))),
        }
    }

    fn resolve_value(&self, attr: usize, r: &Ref) -> Result<usize> {
        let schema = self.catalog().schema();
        match r {
            Ref::Index(i) if *i < schema.cardinality(attr) => Ok(*i),
            Ref::Name(n) => schema
                .value_names(attr)
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| SessionError::BadRequest(format!("unknown value `{n}` for `{}`", schema.name(attr)))),
            Ref::Index(i) => Err(SessionError::BadRequest(format!("value index {i} out of range"))),
        }
    }

    /// Template + slot for a structured request, or the nearest template by
    /// token overlap for raw text. Raw tokens are encoded as typed when they
    /// all belong to the vocabulary.
    fn interpret(&self, req: &FeedbackRequest) -> Result<(FeedbackEvent, Option<Vec<usize>>)> {
        let sim = self.sim();
        if let Some(text) = &req.text {
            let tokens = tokenize(text);
            let slot = sim
                .find_slot(&tokens)
                .ok_or_else(|| SessionError::Unmappable(format!("no attribute value found in `{text}`")))?;
            let template = sim
                .nearest_template(&tokens, slot.attr)
                .ok_or_else(|| SessionError::Unmappable(format!("`{text}` shares no words with any template")))?;
            let raw_ids = sim.vocabulary().ids(&tokens).ok();
            return Ok((FeedbackEvent { template, slot }, raw_ids));
        }
        let (Some(t), Some(a), Some(v)) = (req.template, &req.attribute, &req.value) else {
            return Err(SessionError::BadRequest("give `text`, or `template` with `attribute` and `value`".into()));
        };
        let attr = self.resolve_attr(a)?;
        let value = self.resolve_value(attr, v)?;
        let template = sim
            .templates()
            .get(t)
            .ok_or_else(|| SessionError::BadRequest(format!("unknown template {t}")))?;
        if !template.applies_to(attr) {
            return Err(SessionError::BadRequest(format!("template {t} does not describe `{}`", sim.schema().name(attr))));
        }
        Ok((FeedbackEvent { template: t, slot: Slot { attr, value } }, None))
    }

    fn apply_feedback(&self, session: &mut LiveSession, req: &FeedbackRequest) -> Result<Option<TranscriptEntry>> {
        if req.satisfied {
            session.status = Status::Succeeded;
            session.transcript.push(TranscriptEntry::Satisfied { turn: session.turn });
            return Ok(None);
        }
        let (event, raw_ids) = self.interpret(req)?;
        let sim = self.sim();
        let model = &self.loaded.model;
        let utterance = sim.utterance(event.template, event.slot)?;
        let ids = match raw_ids {
            Some(ids) => ids,
            None => sim.vocabulary().ids(&utterance.tokens)?,
        };
        let first = session
            .last_items()
            .and_then(|items| items.first())
            .map(|c| c.id)
            .ok_or_else(|| SessionError::Internal("session has no recommendation".into()))?;
        let c_txt = model.encode_text(&ids)?;
        session.s = model.advance_state(&session.s, &self.encodings[first], &c_txt)?;
        session.history.push(event);
        session.text_encodings.push(c_txt);
        let schema = sim.schema();
        session.transcript.push(TranscriptEntry::Feedback {
            turn: session.turn,
            template: event.template,
            attribute: schema.name(event.slot.attr).to_string(),
            value: schema.value_name(event.slot.attr, event.slot.value).to_string(),
            text: utterance.text(),
            raw: req.text.clone(),
        });
        Ok(Some(self.next_turn(session)?))
    }
}

/// Append-only JSON-lines log per session; the last line is the current state.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn append(&self, session: &LiveSession) -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(&session.id))?;
        let line = serde_json::to_string(session).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")?;
        f.flush()
    }

    /// Latest snapshot of every logged session.
    pub fn load_all(&self) -> std::io::Result<Vec<LiveSession>> {
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for p in paths {
            let mut last = None;
            for line in BufReader::new(fs::File::open(&p)?).lines() {
                let line = line?;
                if let Ok(s) = serde_json::from_str::<LiveSession>(&line) {
                    last = Some(s);
                }
            }
            out.extend(last);
        }
        Ok(out)
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Loaded models plus the live sessions against them.
pub struct Engine {
    models: BTreeMap<String, Runtime>,
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
    store: Option<SessionStore>,
}

impl Engine {
    pub fn new(models: Vec<LoadedModel>, store: Option<SessionStore>) -> std::io::Result<Self> {
        let models: BTreeMap<String, Runtime> = models.into_iter().map(|m| (m.id.clone(), Runtime::new(m))).collect();
        let mut sessions = HashMap::new();
        if let Some(st) = &store {
            for s in st.load_all()? {
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            models,
            sessions: RwLock::new(sessions),
            store,
        })
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.models.values().map(Runtime::info).collect()
    }

    fn runtime(&self, id: &str) -> Result<&Runtime> {
        self.models.get(id).ok_or_else(|| SessionError::UnknownModel(id.to_string()))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    fn persist(&self, s: &LiveSession) -> Result<()> {
        match &self.store {
            Some(st) => st.append(s).map_err(|e| SessionError::Internal(e.to_string())),
            None => Ok(()),
        }
    }

    pub fn create(&self, req: &CreateRequest) -> Result<TurnResponse> {
        let model_id = match &req.model {
            Some(m) => m.clone(),
            None => self
                .models
                .keys()
                .next()
                .cloned()
                .ok_or_else(|| SessionError::UnknownModel("<none loaded>".into()))?,
        };
        let rt = self.runtime(&model_id)?;
        let k = req.k.unwrap_or(rt.loaded.config.k);
        if k == 0 || k > rt.catalog().len() {
            return Err(SessionError::BadRequest(format!("k must lie in 1..={}", rt.catalog().len())));
        }
        let goal = match (req.goal_item, req.demo) {
            (Some(item), _) if item < rt.catalog().len() => Some(Goal {
                attrs: rt.catalog().item(item).attrs.clone(),
                item,
            }),
            (Some(item), _) => return Err(SessionError::BadRequest(format!("goal item {item} out of range"))),
            (None, true) => {
                let split = if rt.catalog().ids(Split::Unseen).is_empty() { Split::Seen } else { Split::Unseen };
                Some(sample_goal(rt.catalog(), split, &mut rng::stream(req.seed, streams::GOALS))?)
            }
            (None, false) => None,
        };
        let now = now_ms();
        let mut session = LiveSession {
            id: uuid::Uuid::new_v4().simple().to_string(),
            model: model_id,
            k,
            status: Status::Active,
            created_ms: now,
            updated_ms: now,
            goal,
            turn: 0,
            s: rt.loaded.model.initial_state(),
            history: Vec::new(),
            text_encodings: Vec::new(),
            transcript: Vec::new(),
        };
        let entry = rt.next_turn(&mut session)?;
        self.persist(&session)?;
        let response = TurnResponse {
            session: session.id.clone(),
            turn: session.turn,
            status: session.status,
            recommendation: Some(entry),
        };
        self.sessions
            .write()
            .expect("session map lock")
            .insert(session.id.clone(), Arc::new(Mutex::new(session)));
        Ok(response)
    }

    pub fn feedback(&self, id: &str, req: &FeedbackRequest) -> Result<TurnResponse> {
        let handle = self.session(id)?;
        let mut session = handle.lock().expect("session lock");
        if session.status != Status::Active {
            return Err(SessionError::Inactive(id.to_string(), session.status));
        }
        let rt = self.runtime(&session.model)?;
        // work on a copy so a failed request leaves the session untouched
        let mut next = session.clone();
        let entry = rt.apply_feedback(&mut next, req)?;
        next.updated_ms = now_ms();
        self.persist(&next)?;
        *session = next;
        Ok(TurnResponse {
            session: session.id.clone(),
            turn: session.turn,
            status: session.status,
            recommendation: entry,
        })
    }

    pub fn get(&self, id: &str) -> Result<SessionView> {
        let handle = self.session(id)?;
        let session = handle.lock().expect("session lock");
        Ok(session.view())
    }

    /// Ends the session (abandoning it if still active) and summarises it.
    pub fn end(&self, id: &str) -> Result<SessionSummary> {
        let handle = self.session(id)?;
        let mut session = handle.lock().expect("session lock");
        if session.status == Status::Active {
            session.status = Status::Abandoned;
            session.updated_ms = now_ms();
            self.persist(&session)?;
        }
        Ok(session.summary())
    }

    /// Full internal state, goal included (tests and offline analysis).
    pub fn snapshot(&self, id: &str) -> Result<LiveSession> {
        let handle = self.session(id)?;
        let session = handle.lock().expect("session lock");
        Ok(session.clone())
    }
}
