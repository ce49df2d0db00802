//! Synthetic item universe: attribute vectors, embeddings, the seen/unseen
//! split, an attribute predictor and nearest-item retrieval.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numkit::{Adam, Linear, ParamSet, Tape, Tensor};
use crate::rng::{self, streams};
use crate::{Error, Result};

const DEFAULT_ATTRIBUTES: [(&str, &[&str]); 6] = [
    ("category", &["casual shoes", "boots", "sandals", "slippers"]),
    (
        "subcategory",
        &[
            "oxfords",
            "loafers",
            "heels",
            "flats",
            "sneakers and athletic shoes",
            "clogs and mules",
            "ankle boots",
            "knee high",
            "mid-calf",
            "over the knee",
            "boat shoes",
            "espadrilles",
            "flip flops",
            "slides",
            "wedges",
            "platforms",
            "pumps",
            "mary janes",
            "moccasins",
            "booties",
            "prewalker",
        ],
    ),
    (
        "heel height",
        &[
            "flat",
            "under 1in",
            "1in - 1 3/4in",
            "2in - 2 3/4in",
            "3in - 3 3/4in",
            "4in - 4 3/4in",
            "5in and over",
        ],
    ),
    (
        "closure",
        &[
            "lace up",
            "slip-on",
            "buckle",
            "zipper",
            "hook and loop",
            "elastic gore",
            "ankle strap",
            "snap",
            "toggle",
            "adjustable",
            "drawstring",
            "magnetic",
            "button",
            "pull-on",
            "velcro strap",
            "bungee",
            "ghillie",
            "d-ring",
        ],
    ),
    (
        "gender",
        &["men", "women", "boys", "girls", "unisex", "toddler boys", "toddler girls", "little kids"],
    ),
    (
        "toe style",
        &[
            "round toe",
            "pointed toe",
            "open toe",
            "square toe",
            "almond toe",
            "peep toe",
            "capped toe",
            "center seam",
            "moc toe",
            "wingtip",
            "medallion",
            "plain toe",
            "bicycle toe",
            "snip toe",
            "bump toe",
            "split toe",
            "apron toe",
            "closed toe",
            "wide toe box",
        ],
    ),
];

/// Attribute names, cardinalities and human-readable value names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    names: Vec<String>,
    value_names: Vec<Vec<String>>,
}

impl Default for AttributeSchema {
    /// Six shoe attributes with 4, 21, 7, 18, 8 and 19 classes.
    fn default() -> Self {
        Self {
            names: DEFAULT_ATTRIBUTES.iter().map(|(n, _)| n.to_string()).collect(),
            value_names: DEFAULT_ATTRIBUTES
                .iter()
                .map(|(_, vs)| vs.iter().map(|v| v.to_string()).collect())
                .collect(),
        }
    }
}

impl AttributeSchema {
    pub fn new(names: Vec<String>, value_names: Vec<Vec<String>>) -> Result<Self> {
        if names.is_empty() || names.len() != value_names.len() {
            return Err(Error::InvalidArgument("one value list per attribute is required".into()));
        }
        if value_names.iter().any(|v| v.len() < 2) {
            return Err(Error::InvalidArgument("every attribute needs at least two classes".into()));
        }
        Ok(Self { names, value_names })
    }

    /// Schema with generated value names `"<name>-<k>"`.
    pub fn with_cardinalities(names: &[&str], cardinalities: &[usize]) -> Result<Self> {
        let value_names = names
            .iter()
            .zip(cardinalities)
            .map(|(n, &c)| (0..c).map(|k| alloc::format!("{}-{k}", n.replace(' ', "-"))).collect())
            .collect();
        Self::new(names.iter().map(|n| n.to_string()).collect(), value_names)
    }

    pub fn num_attributes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, attr: usize) -> &str {
        &self.names[attr]
    }

    pub fn cardinality(&self, attr: usize) -> usize {
        self.value_names[attr].len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.value_names.iter().map(Vec::len).collect()
    }

    pub fn value_name(&self, attr: usize, value: usize) -> &str {
        &self.value_names[attr][value]
    }

    pub fn value_names(&self, attr: usize) -> &[String] {
        &self.value_names[attr]
    }

    /// Length of the concatenated one-hot encoding.
    pub fn one_hot_len(&self) -> usize {
        self.value_names.iter().map(Vec::len).sum()
    }

    /// Offset of each attribute's block inside the one-hot encoding.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.value_names
            .iter()
            .map(|v| {
                let o = acc;
                acc += v.len();
                o
            })
            .collect()
    }

    /// Number of distinct attribute vectors (saturating).
    pub fn combinations(&self) -> u64 {
        self.value_names
            .iter()
            .fold(1u64, |acc, v| acc.saturating_mul(v.len() as u64))
    }

    pub fn one_hot(&self, attrs: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.one_hot_len()];
        for (off, &a) in self.offsets().iter().zip(attrs) {
            out[off + a] = 1.0;
        }
        out
    }

    pub fn validate(&self, attrs: &[usize]) -> Result<()> {
        if attrs.len() != self.num_attributes() || attrs.iter().zip(&self.value_names).any(|(&a, v)| a >= v.len()) {
            return Err(Error::InvalidArgument(alloc::format!("attribute vector {attrs:?} does not fit the schema")));
        }
        Ok(())
    }

    /// Mixed-radix code of an attribute vector.
    fn encode(&self, attrs: &[usize]) -> u64 {
        attrs
            .iter()
            .zip(&self.value_names)
            .fold(0u64, |acc, (&a, v)| acc * v.len() as u64 + a as u64)
    }

    fn decode(&self, mut code: u64) -> Vec<usize> {
        let mut out = vec![0; self.num_attributes()];
        for (slot, v) in out.iter_mut().zip(&self.value_names).rev() {
            let c = v.len() as u64;
            *slot = (code % c) as usize;
            code /= c;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    /// Ground-truth class index per attribute.
    pub attrs: Vec<usize>,
    pub embedding: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub n_items: usize,
    pub embed_dim: usize,
    /// Standard deviation of the per-item Gaussian noise on embeddings.
    pub noise_sigma: f64,
    /// Length of each one-hot column after the random linear map.
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            embed_dim: 96,
            noise_sigma: 0.1,
            embed_scale: 1.0,
            seed: 0,
        }
    }
}

/// Immutable item universe with retrieval attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    schema: AttributeSchema,
    items: Vec<Item>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    /// Attributes used for retrieval: predictor output once installed,
    /// ground truth before that.
    retrieval_attrs: Vec<Vec<usize>>,
}

fn random_map(schema: &AttributeSchema, config: &CatalogConfig, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let rows = schema.one_hot_len();
    let d = config.embed_dim;
    let mut map: Vec<Vec<f64>> = Vec::with_capacity(rows);
    let orthonormal = d >= rows;
    for _ in 0..rows {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if orthonormal {
            for prev in &map {
                let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        v.iter_mut().for_each(|x| *x /= norm);
        map.push(v);
    }
    for row in &mut map {
        row.iter_mut().for_each(|x| *x *= config.embed_scale);
    }
    map
}

/// Samples distinct attribute vectors and their embeddings.
///
/// Embeddings are a fixed random linear map of the concatenated one-hot
/// attributes (orthonormal columns when `embed_dim` allows) plus isotropic
/// Gaussian noise. All items start in the seen split.
pub fn generate_catalog(schema: &AttributeSchema, config: &CatalogConfig) -> Result<Catalog> {
    if config.n_items == 0 {
        return Err(Error::InvalidArgument("catalog needs at least one item".into()));
    }
    if config.embed_dim < 4 {
        return Err(Error::InvalidArgument("embedding dimension must be at least 4".into()));
    }
    let available = schema.combinations();
    if config.n_items as u64 > available {
        return Err(Error::TooManyItems {
            requested: config.n_items as u64,
            available,
        });
    }
    let mut rng = rng::stream(config.seed, streams::CATALOG);
    let map = random_map(schema, config, &mut rng);

    let codes: Vec<u64> = if (config.n_items as u64) * 2 > available {
        let mut all: Vec<u64> = (0..available).collect();
        all.shuffle(&mut rng);
        all.truncate(config.n_items);
        all
    } else {
        let mut taken = BTreeSet::new();
        let mut codes = Vec::with_capacity(config.n_items);
        while codes.len() < config.n_items {
            let attrs: Vec<usize> = (0..schema.num_attributes())
                .map(|a| rng.random_range(0..schema.cardinality(a)))
                .collect();
            let code = schema.encode(&attrs);
            if taken.insert(code) {
                codes.push(code);
            }
        }
        codes
    };

    let offsets = schema.offsets();
    let items: Vec<Item> = codes
        .into_iter()
        .enumerate()
        .map(|(id, code)| {
            let attrs = schema.decode(code);
            let mut embedding = vec![0.0; config.embed_dim];
            for (off, &a) in offsets.iter().zip(&attrs) {
                for (e, m) in embedding.iter_mut().zip(&map[off + a]) {
                    *e += m;
                }
            }
            for e in &mut embedding {
                let z: f64 = StandardNormal.sample(&mut rng);
                *e += config.noise_sigma * z;
            }
            Item {
                id,
                attrs,
                embedding,
                split: Split::Seen,
            }
        })
        .collect();
    Catalog::from_items(schema.clone(), items)
}

/// Randomly moves `1 - seen_fraction` of the items to the unseen split.
pub fn split_seen_unseen(catalog: &Catalog, seen_fraction: f64, seed: u64) -> Result<Catalog> {
    let n = catalog.len();
    let n_seen = libm::round(seen_fraction * n as f64) as usize;
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) || n_seen == 0 || n_seen >= n {
        return Err(Error::InvalidArgument(alloc::format!(
            "seen fraction {seen_fraction} leaves an empty split for {n} items"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(seed, streams::SPLIT));
    let mut items = catalog.items.clone();
    for (rank, &id) in ids.iter().enumerate() {
        items[id].split = if rank < n_seen { Split::Seen } else { Split::Unseen };
    }
    let mut out = Catalog::from_items(catalog.schema.clone(), items)?;
    out.retrieval_attrs = catalog.retrieval_attrs.clone();
    Ok(out)
}

impl Catalog {
    /// Assembles a catalog from explicit items; ids must be `0..n` in order.
    pub fn from_items(schema: AttributeSchema, items: Vec<Item>) -> Result<Self> {
        let dim = items.first().map(|i| i.embedding.len()).unwrap_or(0);
        for (k, item) in items.iter().enumerate() {
            if item.id != k {
                return Err(Error::InvalidArgument(alloc::format!("item ids must be dense, found {} at {k}", item.id)));
            }
            schema.validate(&item.attrs)?;
            if item.embedding.len() != dim {
                return Err(Error::InvalidArgument("embedding lengths differ".into()));
            }
        }
        let seen = items.iter().filter(|i| i.split == Split::Seen).map(|i| i.id).collect();
        let unseen = items.iter().filter(|i| i.split == Split::Unseen).map(|i| i.id).collect();
        let retrieval_attrs = items.iter().map(|i| i.attrs.clone()).collect();
        Ok(Self {
            schema,
            items,
            seen,
            unseen,
            retrieval_attrs,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: usize) -> &Item {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.items.first().map(|i| i.embedding.len()).unwrap_or(0)
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Seen => &self.seen,
            Split::Unseen => &self.unseen,
        }
    }

    /// Attributes the recommender sees for `id` (predicted when installed).
    pub fn retrieval_attrs(&self, id: usize) -> &[usize] {
        &self.retrieval_attrs[id]
    }

    /// Installs explicit retrieval attributes, one vector per item.
    pub fn with_retrieval_attrs(mut self, attrs: Vec<Vec<usize>>) -> Result<Self> {
        if attrs.len() != self.items.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} retrieval vectors for {} items",
                attrs.len(),
                self.items.len()
            )));
        }
        for a in &attrs {
            self.schema.validate(a)?;
        }
        self.retrieval_attrs = attrs;
        Ok(self)
    }

    /// Installs predicted attributes for every item.
    pub fn with_predictions(mut self, predictor: &AttributePredictor) -> Self {
        self.retrieval_attrs = self.items.iter().map(|i| predictor.predict(&i.embedding)).collect();
        self
    }
}

/// Number of attributes whose class indices differ.
pub fn attr_mismatch_count(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Euclidean distance between embeddings.
pub fn embed_distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// A retrieved item and its distance to the query in one-hot attribute space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Top-`k` items of `pool` nearest to `query`, measured between one-hot
/// encodings of the query and of each item's retrieval attributes.
///
/// Two one-hot vectors differing in `m` attributes are `sqrt(2 m)` apart, so
/// ranking by `(mismatches, id)` is the exact Euclidean order with ties
/// broken toward lower ids.
pub fn nearest_items(catalog: &Catalog, query: &[usize], k: usize, pool: &[usize]) -> Result<Vec<Neighbor>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if k == 0 || k > pool.len() {
        return Err(Error::InvalidArgument(alloc::format!("k={k} outside 1..={}", pool.len())));
    }
    let mut keyed: Vec<(usize, usize)> = pool
        .iter()
        .map(|&id| (attr_mismatch_count(query, catalog.retrieval_attrs(id)), id))
        .collect();
    if k < keyed.len() {
        keyed.select_nth_unstable(k - 1);
        keyed.truncate(k);
    }
    keyed.sort_unstable();
    Ok(keyed
        .into_iter()
        .map(|(m, id)| Neighbor {
            id,
            distance: libm::sqrt(2.0 * m as f64),
        })
        .collect())
}

/// Linear multi-head softmax classifier from item embedding to attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributePredictor {
    pub params: ParamSet,
    layer: Linear,
    cardinalities: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    /// Held-out (unseen split) accuracy per attribute.
    pub unseen_accuracy: Vec<f64>,
    pub final_loss: f64,
}

impl AttributePredictor {
    pub fn new(embed_dim: usize, schema: &AttributeSchema, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, streams::PREDICTOR);
        let layer = Linear::new(&mut params, "predictor", embed_dim, schema.one_hot_len(), &mut rng)?;
        Ok(Self {
            params,
            layer,
            cardinalities: schema.cardinalities(),
        })
    }

    pub fn from_params(params: ParamSet, schema: &AttributeSchema) -> Result<Self> {
        let layer = Linear::bind(&params, "predictor")?;
        if layer.outputs != schema.one_hot_len() {
            return Err(Error::InvalidArgument("predictor output size does not match schema".into()));
        }
        Ok(Self {
            params,
            layer,
            cardinalities: schema.cardinalities(),
        })
    }

    /// Class probabilities per attribute head.
    pub fn head_probabilities(&self, embedding: &[f64]) -> Vec<Vec<f64>> {
        let w = self.params.value(self.layer.weight);
        let mut logits = self.params.value(self.layer.bias).data().to_vec();
        let n = logits.len();
        for (x, row) in embedding.iter().zip(w.data().chunks(n)) {
            for (l, wv) in logits.iter_mut().zip(row) {
                *l += x * wv;
            }
        }
        let mut out = Vec::with_capacity(self.cardinalities.len());
        let mut off = 0;
        for &c in &self.cardinalities {
            out.push(crate::numkit::softmax(&logits[off..off + c]));
            off += c;
        }
        out
    }

    /// Argmax class per head; ties resolve to the lower index.
    pub fn predict(&self, embedding: &[f64]) -> Vec<usize> {
        self.head_probabilities(embedding).iter().map(|p| argmax(p)).collect()
    }

    fn loss(&self, tape: &mut Tape, catalog: &Catalog, batch: &[usize]) -> Result<crate::numkit::Var> {
        let dim = catalog.embed_dim();
        let mut data = Vec::with_capacity(batch.len() * dim);
        for &id in batch {
            data.extend_from_slice(&catalog.item(id).embedding);
        }
        let x = tape.constant(Tensor::matrix(batch.len(), dim, data)?)?;
        let logits = self.layer.forward(tape, x)?;
        let mut total = None;
        let mut off = 0;
        for (attr, &c) in self.cardinalities.iter().enumerate() {
            let head = tape.slice_cols(logits, off, c)?;
            let ls = tape.log_softmax(head)?;
            let targets: Vec<usize> = batch.iter().map(|&id| catalog.item(id).attrs[attr]).collect();
            let picked = tape.pick(ls, &targets)?;
            let s = tape.sum(picked)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
            off += c;
        }
        let total = total.expect("schema has attributes");
        tape.scale(total, -1.0 / batch.len() as f64)
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn fit_predictor(catalog: &Catalog, ids: &[usize], config: &PredictorConfig) -> Result<(AttributePredictor, f64)> {
    let mut predictor = AttributePredictor::new(catalog.embed_dim(), catalog.schema(), config.seed)?;
    let mut rng = rng::stream(config.seed, streams::PREDICTOR);
    let adam = Adam::default();
    let mut order = ids.to_vec();
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let grads = {
                let mut tape = Tape::new(&predictor.params);
                let loss = predictor.loss(&mut tape, catalog, batch)?;
                final_loss = tape.scalar(loss);
                tape.backward(loss)?
            };
            if !final_loss.is_finite() {
                return Err(Error::Divergence("attribute predictor loss".into()));
            }
            predictor.params.accumulate(&grads);
            adam.step(&mut predictor.params, config.learning_rate)?;
        }
    }
    Ok((predictor, final_loss))
}

/// Trains the attribute predictor on the seen split with cross-entropy and
/// reports per-attribute accuracy on the unseen split.
pub fn train_attribute_predictor(catalog: &Catalog, config: &PredictorConfig) -> Result<(AttributePredictor, PredictorReport)> {
    let seen = catalog.ids(Split::Seen);
    if seen.is_empty() {
        return Err(Error::InvalidArgument("seen split is empty".into()));
    }
    let (predictor, final_loss) = fit_predictor(catalog, seen, config)?;
    let unseen_accuracy = accuracy(&predictor, catalog, catalog.ids(Split::Unseen));
    Ok((
        predictor,
        PredictorReport {
            unseen_accuracy,
            final_loss,
        },
    ))
}

/// Per-attribute accuracy of `predictor` on `ids` (empty ids give an empty report).
pub fn accuracy(predictor: &AttributePredictor, catalog: &Catalog, ids: &[usize]) -> Vec<f64> {
    let n_attr = catalog.schema().num_attributes();
    if ids.is_empty() {
        return Vec::new();
    }
    let mut hits = vec![0usize; n_attr];
    for &id in ids {
        let item = catalog.item(id);
        for (h, (p, t)) in hits.iter_mut().zip(predictor.predict(&item.embedding).iter().zip(&item.attrs)) {
            if p == t {
                *h += 1;
            }
        }
    }
    hits.into_iter().map(|h| h as f64 / ids.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, sigma: f64) -> Catalog {
        let cfg = CatalogConfig {
            n_items: n,
            noise_sigma: sigma,
            seed: 7,
            ..CatalogConfig::default()
        };
        generate_catalog(&AttributeSchema::default(), &cfg).unwrap()
    }

    #[test]
    fn default_schema_cardinalities() {
        assert_eq!(AttributeSchema::default().cardinalities(), vec![4, 21, 7, 18, 8, 19]);
        assert_eq!(AttributeSchema::default().one_hot_len(), 77);
    }

    #[test]
    fn single_item_catalog() {
        let c = small(1, 0.1);
        assert_eq!(c.len(), 1);
        assert_eq!(c.item(0).id, 0);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(50, 0.1), small(50, 0.1));
    }

    #[test]
    fn two_thousand_items_are_distinct() {
        let c = small(2000, 0.1);
        let mut seen = BTreeSet::new();
        for item in c.items() {
            assert!(seen.insert(item.attrs.clone()), "duplicate {:?}", item.attrs);
        }
    }

    #[test]
    fn too_many_items_is_an_error() {
        let schema = AttributeSchema::with_cardinalities(&["a", "b"], &[2, 3]).unwrap();
        let cfg = CatalogConfig {
            n_items: 7,
            ..CatalogConfig::default()
        };
        assert!(matches!(generate_catalog(&schema, &cfg), Err(Error::TooManyItems { .. })));
        let cfg = CatalogConfig {
            n_items: 6,
            ..CatalogConfig::default()
        };
        assert_eq!(generate_catalog(&schema, &cfg).unwrap().len(), 6);
    }

    #[test]
    fn split_counts_follow_the_fraction() {
        let c = split_seen_unseen(&small(2000, 0.1), 0.8, 3).unwrap();
        assert_eq!(c.ids(Split::Seen).len(), 1600);
        assert_eq!(c.ids(Split::Unseen).len(), 400);
        assert_eq!(split_seen_unseen(&small(2000, 0.1), 0.8, 3).unwrap(), c);
        let mut all: Vec<usize> = c.ids(Split::Seen).iter().chain(c.ids(Split::Unseen)).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
    }

    #[test]
    fn split_of_full_dataset_size() {
        let n: usize = 50_025;
        assert_eq!(libm::round(0.8 * n as f64) as usize, 40_020);
    }

    #[test]
    fn degenerate_split_is_rejected() {
        assert!(split_seen_unseen(&small(3, 0.1), 0.1, 0).is_err());
        assert!(split_seen_unseen(&small(3, 0.1), 1.0, 0).is_err());
    }

    #[test]
    fn mismatch_counts() {
        assert_eq!(attr_mismatch_count(&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 4, 5, 6]), 0);
        assert_eq!(attr_mismatch_count(&[1, 2, 3, 4, 5, 6], &[0, 0, 0, 0, 0, 0]), 6);
        assert_eq!(attr_mismatch_count(&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 9, 9, 6]), 2);
    }

    #[test]
    fn embed_distance_basics() {
        let e = vec![0.5, -1.0, 2.0];
        assert_eq!(embed_distance(&e, &e), 0.0);
        let shifted = vec![1.5, -1.0, 2.0];
        assert_eq!(embed_distance(&e, &shifted), 1.0);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[0.7, 0.1, 0.1, 0.1]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
    }

    #[test]
    fn exact_query_retrieves_the_item() {
        let c = small(200, 0.1);
        let pool: Vec<usize> = (0..200).collect();
        let hit = nearest_items(&c, &c.item(42).attrs, 1, &pool).unwrap();
        assert_eq!(hit[0].id, 42);
        assert_eq!(hit[0].distance, 0.0);
        let all = nearest_items(&c, &c.item(42).attrs, 200, &pool).unwrap();
        assert_eq!(all.len(), 200);
        assert!(all.windows(2).all(|w| (w[0].distance, w[0].id) < (w[1].distance, w[1].id)));
    }

    #[test]
    fn retrieval_rejects_bad_k_and_empty_pool() {
        let c = small(10, 0.1);
        assert_eq!(nearest_items(&c, &c.item(0).attrs, 1, &[]), Err(Error::EmptyPool));
        assert!(nearest_items(&c, &c.item(0).attrs, 11, &(0..10).collect::<Vec<_>>()).is_err());
        assert!(nearest_items(&c, &c.item(0).attrs, 0, &[1]).is_err());
    }

    #[test]
    fn untrained_predictor_is_near_chance_on_small_head() {
        let c = split_seen_unseen(&small(2000, 0.1), 0.8, 1).unwrap();
        let p = AttributePredictor::new(c.embed_dim(), c.schema(), 11).unwrap();
        let acc = accuracy(&p, &c, c.ids(Split::Unseen));
        assert!((acc[0] - 0.25).abs() < 0.15, "{acc:?}");
    }

    #[test]
    fn noiseless_embeddings_are_predicted_exactly() {
        let c = split_seen_unseen(&small(2000, 0.0), 0.8, 1).unwrap();
        let (p, report) = train_attribute_predictor(&c, &PredictorConfig::default()).unwrap();
        assert!(report.unseen_accuracy.iter().all(|&a| a == 1.0), "{report:?}");
        let c = c.with_predictions(&p);
        for &id in c.ids(Split::Unseen) {
            assert_eq!(c.retrieval_attrs(id), c.item(id).attrs.as_slice());
        }
    }

    #[test]
    fn default_noise_keeps_predictor_accurate() {
        let c = split_seen_unseen(&small(2000, 0.1), 0.8, 1).unwrap();
        let (_, report) = train_attribute_predictor(&c, &PredictorConfig::default()).unwrap();
        assert!(report.unseen_accuracy.iter().all(|&a| a >= 0.9), "{report:?}");
    }
}
