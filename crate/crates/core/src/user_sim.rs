//! Template-driven surrogate user.
//!
//! The simulator holds a hidden goal, comments on one attribute where the
//! recommended item differs from it, and serves as the ground-truth oracle
//! for success and violation counts.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::{AttributeSchema, Catalog, Split};
use crate::{Error, Result};

/// Reserved token marking the value slot of a template.
pub const SLOT_TOKEN: &str = "<slot>";

/// One stated preference: attribute index and desired class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub attr: usize,
    pub value: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub tokens: Vec<String>,
    /// Attributes this template may describe; empty means all.
    pub attributes: Vec<usize>,
}

impl Template {
    pub fn applies_to(&self, attr: usize) -> bool {
        self.attributes.is_empty() || self.attributes.contains(&attr)
    }
}

/// Lowercases, splits on whitespace and detaches trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = lower.as_str();
        let mut tail = Vec::new();
        while let Some(c) = word.chars().last() {
            if word.len() > 1 && matches!(c, '.' | ',' | '?' | '!') && word != SLOT_TOKEN {
                tail.push(c.to_string());
                word = &word[..word.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        if matches!(word, "." | "," | "?" | "!") {
            out.push(word.to_string());
        } else if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

const DEFAULT_TEMPLATES: [(&[&str], &str); 10] = [
    (&[], "please show me more <slot> ."),
    (&[], "i am looking for <slot> ."),
    (&[], "i prefer <slot> ."),
    (&["closure"], "i want the shoes with <slot> closure ."),
    (&["subcategory", "heel height", "closure", "toe style"], "do you have shoes with <slot> ."),
    (&["heel height", "closure", "toe style"], "show me more shoes with <slot> ."),
    (&["gender"], "i am looking for shoes for <slot> ."),
    (&["gender"], "please provide some shoes for <slot> ."),
    (&[], "i like <slot> ."),
    (&[], "do you have more <slot> ."),
];

/// Parses one template line: an optional `[attr, attr]` applicability prefix
/// followed by the template text with exactly one slot token.
pub fn parse_template_line(line: &str, id: usize, schema: &AttributeSchema) -> Result<Template> {
    let line = line.trim();
    let (attrs, text) = match line.strip_prefix('[') {
        Some(rest) => {
            let (list, text) = rest
                .split_once(']')
                .ok_or_else(|| Error::InvalidArgument(alloc::format!("unclosed attribute list in `{line}`")))?;
            let mut attrs = Vec::new();
            for name in list.split(',').map(str::trim).filter(|n| !n.is_empty()) {
                let idx = schema
                    .names()
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown attribute `{name}`")))?;
                attrs.push(idx);
            }
            (attrs, text)
        }
        None => (Vec::new(), line),
    };
    let tokens = tokenize(text);
    if tokens.iter().filter(|t| *t == SLOT_TOKEN).count() != 1 {
        return Err(Error::InvalidArgument(alloc::format!("template `{text}` must contain exactly one {SLOT_TOKEN}")));
    }
    Ok(Template {
        id,
        tokens,
        attributes: attrs,
    })
}

/// Inverse of [`parse_template_line`].
pub fn format_template_line(template: &Template, schema: &AttributeSchema) -> String {
    let text = template.tokens.join(" ");
    if template.attributes.is_empty() {
        text
    } else {
        let names: Vec<&str> = template.attributes.iter().map(|&a| schema.name(a)).collect();
        alloc::format!("[{}] {text}", names.join(", "))
    }
}

/// Closed token vocabulary built from templates and attribute value names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    fn build(templates: &[Template], schema: &AttributeSchema) -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in templates {
            for tok in t.tokens.iter().filter(|t| *t != SLOT_TOKEN) {
                vocab.insert(tok);
            }
        }
        for a in 0..schema.num_attributes() {
            for v in schema.value_names(a) {
                for tok in tokenize(v) {
                    vocab.insert(&tok);
                }
            }
        }
        vocab
    }

    fn insert(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }
}

/// A templated comment with its ground-truth slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slot: Slot,
    pub template: usize,
}

impl Utterance {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl Utterance {
    pub fn event(&self) -> FeedbackEvent {
        FeedbackEvent {
            template: self.template,
            slot: self.slot,
        }
    }
}

/// Compact record of a comment: which template carried which slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub template: usize,
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Feedback {
    Satisfied,
    Comment(Utterance),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub attrs: Vec<usize>,
    pub item: usize,
}

/// How the simulator picks which differing attribute to talk about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Prominence {
    #[default]
    Uniform,
    /// First differing attribute in this order.
    Priority(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSimulator {
    schema: AttributeSchema,
    templates: Vec<Template>,
    vocab: Vocabulary,
    value_tokens: Vec<Vec<Vec<String>>>,
    pub prominence: Prominence,
}

impl UserSimulator {
    /// Simulator with the built-in templates. Templates naming attributes the
    /// schema lacks are dropped.
    pub fn new(schema: &AttributeSchema) -> Result<Self> {
        let mut templates = Vec::new();
        for (attrs, text) in DEFAULT_TEMPLATES {
            let resolved: Vec<usize> = attrs
                .iter()
                .filter_map(|a| schema.names().iter().position(|n| n == a))
                .collect();
            if !attrs.is_empty() && resolved.is_empty() {
                continue;
            }
            let mut t = parse_template_line(text, templates.len(), schema)?;
            t.attributes = resolved;
            templates.push(t);
        }
        Self::with_templates(schema, templates)
    }

    pub fn with_templates(schema: &AttributeSchema, templates: Vec<Template>) -> Result<Self> {
        for a in 0..schema.num_attributes() {
            if !templates.iter().any(|t| t.applies_to(a)) {
                return Err(Error::InvalidArgument(alloc::format!("no template covers `{}`", schema.name(a))));
            }
        }
        for (i, t) in templates.iter().enumerate() {
            if t.id != i || t.tokens.iter().filter(|x| *x == SLOT_TOKEN).count() != 1 {
                return Err(Error::InvalidArgument(alloc::format!("malformed template {i}")));
            }
        }
        let vocab = Vocabulary::build(&templates, schema);
        let value_tokens = (0..schema.num_attributes())
            .map(|a| schema.value_names(a).iter().map(|v| tokenize(v)).collect())
            .collect();
        Ok(Self {
            schema: schema.clone(),
            templates,
            vocab,
            value_tokens,
            prominence: Prominence::Uniform,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Fills `template` with the value name of `slot`.
    pub fn utterance(&self, template: usize, slot: Slot) -> Result<Utterance> {
        let t = self
            .templates
            .get(template)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown template {template}")))?;
        if slot.attr >= self.schema.num_attributes() || slot.value >= self.schema.cardinality(slot.attr) {
            return Err(Error::InvalidArgument(alloc::format!("slot {slot:?} outside schema")));
        }
        if !t.applies_to(slot.attr) {
            return Err(Error::InvalidArgument(alloc::format!(
                "template {template} does not describe `{}`",
                self.schema.name(slot.attr)
            )));
        }
        let mut tokens = Vec::with_capacity(t.tokens.len() + 3);
        for tok in &t.tokens {
            if tok == SLOT_TOKEN {
                tokens.extend(self.value_tokens[slot.attr][slot.value].iter().cloned());
            } else {
                tokens.push(tok.clone());
            }
        }
        Ok(Utterance {
            tokens,
            slot,
            template,
        })
    }

    /// Dense index of a (template, slot) pair, used to cache encodings.
    pub fn utterance_key(&self, template: usize, slot: Slot) -> usize {
        let offsets = self.schema.offsets();
        template * self.schema.one_hot_len() + offsets[slot.attr] + slot.value
    }

    pub fn num_utterance_keys(&self) -> usize {
        self.templates.len() * self.schema.one_hot_len()
    }

    /// Finds the attribute value whose name occurs in `tokens` (longest match wins).
    pub fn find_slot(&self, tokens: &[String]) -> Option<Slot> {
        let mut best: Option<(usize, Slot)> = None;
        for (attr, values) in self.value_tokens.iter().enumerate() {
            for (value, name) in values.iter().enumerate() {
                let n = name.len();
                if n == 0 || n > tokens.len() {
                    continue;
                }
                if tokens.windows(n).any(|w| w == name.as_slice()) && best.map_or(true, |(len, _)| n > len) {
                    best = Some((n, Slot { attr, value }));
                }
            }
        }
        best.map(|(_, s)| s)
    }

    /// Template sharing the most tokens with `tokens` among those applicable
    /// to `attr`; ties go to the lower id. `None` when nothing overlaps.
    pub fn nearest_template(&self, tokens: &[String], attr: usize) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for t in self.templates.iter().filter(|t| t.applies_to(attr)) {
            let overlap = t.tokens.iter().filter(|x| *x != SLOT_TOKEN && tokens.contains(x)).count();
            if overlap > 0 && best.map_or(true, |(o, _)| overlap > o) {
                best = Some((overlap, t.id));
            }
        }
        best.map(|(_, id)| id)
    }

    /// Comment on one attribute where `recommended` differs from the goal,
    /// or [`Feedback::Satisfied`] when nothing differs.
    pub fn give_feedback<R: rand::Rng + ?Sized>(&self, recommended: &[usize], goal: &Goal, rng: &mut R) -> Feedback {
        let differing: Vec<usize> = (0..goal.attrs.len()).filter(|&a| recommended[a] != goal.attrs[a]).collect();
        if differing.is_empty() {
            return Feedback::Satisfied;
        }
        let attr = match &self.prominence {
            Prominence::Uniform => differing[rng.random_range(0..differing.len())],
            Prominence::Priority(order) => order
                .iter()
                .copied()
                .find(|a| differing.contains(a))
                .unwrap_or(differing[0]),
        };
        let candidates: Vec<usize> = self.templates.iter().filter(|t| t.applies_to(attr)).map(|t| t.id).collect();
        let template = candidates[rng.random_range(0..candidates.len())];
        let slot = Slot {
            attr,
            value: goal.attrs[attr],
        };
        Feedback::Comment(self.utterance(template, slot).expect("template applies to the attribute"))
    }
}

/// Uniformly samples a goal item from `split`.
pub fn sample_goal<R: rand::Rng + ?Sized>(catalog: &Catalog, split: Split, rng: &mut R) -> Result<Goal> {
    let ids = catalog.ids(split);
    if ids.is_empty() {
        return Err(Error::EmptyPool);
    }
    let item = ids[rng.random_range(0..ids.len())];
    Ok(Goal {
        attrs: catalog.item(item).attrs.clone(),
        item,
    })
}

/// True when any recommended item's ground-truth attributes equal the goal.
pub fn is_success(catalog: &Catalog, recommended: &[usize], goal: &Goal) -> bool {
    recommended.iter().any(|&id| catalog.item(id).attrs == goal.attrs)
}

/// Number of attributes whose latest stated value disagrees with `item_attrs`.
pub fn count_violations(item_attrs: &[usize], history: &[Slot]) -> usize {
    let mut latest: BTreeMap<usize, usize> = BTreeMap::new();
    for s in history {
        latest.insert(s.attr, s.value);
    }
    latest.iter().filter(|(&a, &v)| item_attrs[a] != v).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, split_seen_unseen, CatalogConfig};
    use crate::rng;
    use alloc::vec;

    fn sim() -> UserSimulator {
        UserSimulator::new(&AttributeSchema::default()).unwrap()
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("I prefer Lace up."), vec!["i", "prefer", "lace", "up", "."]);
        assert_eq!(tokenize("  <slot> ."), vec!["<slot>", "."]);
    }

    #[test]
    fn every_attribute_has_a_template() {
        let s = sim();
        for a in 0..6 {
            assert!(s.templates().iter().any(|t| t.applies_to(a)));
        }
        assert!(s.templates().len() >= 5);
    }

    #[test]
    fn satisfied_when_equal() {
        let goal = Goal {
            attrs: vec![0, 1, 2, 3, 4, 5],
            item: 0,
        };
        let mut r = rng::stream(0, 0);
        assert_eq!(sim().give_feedback(&goal.attrs.clone(), &goal, &mut r), Feedback::Satisfied);
    }

    #[test]
    fn single_difference_is_forced() {
        let goal = Goal {
            attrs: vec![0, 1, 2, 3, 4, 5],
            item: 0,
        };
        let mut rec = goal.attrs.clone();
        rec[4] = 7;
        let mut r = rng::stream(1, 0);
        for _ in 0..20 {
            match sim().give_feedback(&rec, &goal, &mut r) {
                Feedback::Comment(u) => assert_eq!(u.slot, Slot { attr: 4, value: 4 }),
                Feedback::Satisfied => panic!("items differ"),
            }
        }
    }

    #[test]
    fn differing_attributes_are_chosen_uniformly() {
        let s = sim();
        let goal = Goal {
            attrs: vec![0, 0, 0, 0, 0, 0],
            item: 0,
        };
        let rec = vec![1, 1, 1, 0, 0, 0];
        let mut r = rng::stream(2, 0);
        let n = 10_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            if let Feedback::Comment(u) = s.give_feedback(&rec, &goal, &mut r) {
                counts[u.slot.attr] += 1;
            }
        }
        let p = 1.0 / 3.0;
        let sd = libm::sqrt(n as f64 * p * (1.0 - p));
        for &c in &counts[..3] {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
        assert_eq!(counts[3..], [0, 0, 0]);
    }

    #[test]
    fn priority_order_is_respected() {
        let mut s = sim();
        s.prominence = Prominence::Priority(vec![5, 4, 3, 2, 1, 0]);
        let goal = Goal {
            attrs: vec![0; 6],
            item: 0,
        };
        let mut r = rng::stream(3, 0);
        match s.give_feedback(&[1, 1, 0, 0, 0, 1], &goal, &mut r) {
            Feedback::Comment(u) => assert_eq!(u.slot.attr, 5),
            Feedback::Satisfied => panic!(),
        }
    }

    #[test]
    fn utterance_tokens_are_in_vocabulary() {
        let s = sim();
        let u = s.utterance(3, Slot { attr: 3, value: 0 }).unwrap();
        assert_eq!(u.text(), "i want the shoes with lace up closure .");
        assert!(s.vocabulary().ids(&u.tokens).is_ok());
        assert!(s.utterance(3, Slot { attr: 0, value: 0 }).is_err());
    }

    #[test]
    fn slots_are_recovered_from_text() {
        let s = sim();
        let toks = tokenize("Do you have shoes with hook and loop?");
        assert_eq!(s.find_slot(&toks), Some(Slot { attr: 3, value: 4 }));
        let toks = tokenize("show me sneakers and athletic shoes");
        assert_eq!(s.find_slot(&toks), Some(Slot { attr: 1, value: 4 }));
        assert_eq!(s.find_slot(&tokenize("nothing relevant")), None);
    }

    #[test]
    fn goal_sampling() {
        let cfg = CatalogConfig {
            n_items: 2000,
            seed: 5,
            ..CatalogConfig::default()
        };
        let c = generate_catalog(&AttributeSchema::default(), &cfg).unwrap();
        let c = split_seen_unseen(&c, 0.8, 5).unwrap();
        let mut a = rng::stream(9, 0);
        let mut b = rng::stream(9, 0);
        assert_eq!(sample_goal(&c, Split::Seen, &mut a).unwrap(), sample_goal(&c, Split::Seen, &mut b).unwrap());

        // chi-square uniformity over 1600 seen items, 10^4 draws
        let n = 10_000;
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            let g = sample_goal(&c, Split::Seen, &mut a).unwrap();
            assert_eq!(g.attrs, c.item(g.item).attrs);
            *counts.entry(g.item).or_insert(0usize) += 1;
        }
        let k = c.ids(Split::Seen).len() as f64;
        let e = n as f64 / k;
        let chi2: f64 = c
            .ids(Split::Seen)
            .iter()
            .map(|id| {
                let o = *counts.get(id).unwrap_or(&0) as f64;
                (o - e) * (o - e) / e
            })
            .sum();
        // df = k - 1; mean df, sd sqrt(2 df)
        assert!((chi2 - (k - 1.0)).abs() < 3.0 * libm::sqrt(2.0 * (k - 1.0)), "{chi2}");
    }

    #[test]
    fn success_uses_attributes() {
        let cfg = CatalogConfig {
            n_items: 20,
            seed: 1,
            ..CatalogConfig::default()
        };
        let c = generate_catalog(&AttributeSchema::default(), &cfg).unwrap();
        let goal = Goal {
            attrs: c.item(3).attrs.clone(),
            item: 99,
        };
        assert!(is_success(&c, &[3], &goal));
        assert!(is_success(&c, &[1, 2, 3], &goal));
        assert!(!is_success(&c, &[4], &goal));
    }

    #[test]
    fn violations_follow_latest_statement() {
        let closure = 3;
        let item = vec![0, 0, 0, 3, 0, 0];
        assert_eq!(count_violations(&item, &[]), 0);
        assert_eq!(count_violations(&item, &[Slot { attr: closure, value: 3 }]), 0);
        let hist = [Slot { attr: closure, value: 3 }, Slot { attr: closure, value: 5 }];
        assert_eq!(count_violations(&item, &hist), 1);
    }

    #[test]
    fn template_lines_round_trip() {
        let schema = AttributeSchema::default();
        let s = sim();
        for t in s.templates() {
            let line = format_template_line(t, &schema);
            assert_eq!(&parse_template_line(&line, t.id, &schema).unwrap(), t);
        }
        assert!(parse_template_line("no slot here", 0, &schema).is_err());
        assert!(parse_template_line("<slot> and <slot>", 0, &schema).is_err());
        assert!(parse_template_line("[colour] i like <slot>", 0, &schema).is_err());
    }
}
