//! Deterministic template-based NLU corpus with Zipfian word frequencies,
//! an out-of-domain class and matching synthetic pretrained embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::embio::{EmbeddingMatrix, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::nlu::{TagSchema, Utterance, OOD_DOMAIN, OOD_INTENT, OTHER_TAG};
use crate::numerics::{Matrix, Rng};

/// Generator settings. Every field has a default, so a config file only
/// needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Including `OOD`.
    pub domains: usize,
    pub intents_per_domain: usize,
    /// Including `Other`.
    pub slot_tags: usize,
    pub templates_per_intent: usize,
    pub keywords_per_intent: usize,
    pub values_per_tag: usize,
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub ood_fraction: f64,
    /// Probability that an in-domain utterance carries only a keyword
    /// shared by two intents and a template of either one.
    pub ambiguity: f64,
    pub embedding_dim: usize,
    /// Share of a slot value embedding's variance explained by its tag
    /// centroid.
    pub embedding_role_share: f64,
    /// Share of the variance in a low-rank subspace common to all words.
    pub embedding_latent_share: f64,
    pub embedding_latent_rank: usize,
    /// Synthetic embedding rows all have norm `embedding_scale * sqrt(dim)`.
    pub embedding_scale: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 7,
            domains: 5,
            intents_per_domain: 4,
            slot_tags: 12,
            templates_per_intent: 3,
            keywords_per_intent: 3,
            values_per_tag: 40,
            vocab_size: 2000,
            zipf_exponent: 1.1,
            train_size: 20_000,
            validation_size: 2_000,
            test_size: 2_000,
            ood_fraction: 0.1,
            ambiguity: 0.05,
            embedding_dim: 50,
            embedding_role_share: 0.2,
            embedding_latent_share: 0.6,
            embedding_latent_rank: 8,
            embedding_scale: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.domains < 2 {
            return bad(format!("need at least one supported domain plus OOD, got {}", self.domains));
        }
        if self.intents_per_domain < 1 || self.templates_per_intent < 1 || self.keywords_per_intent < 1 {
            return bad("intents, templates and keywords per intent must be positive".into());
        }
        if self.slot_tags < 2 || self.values_per_tag < 1 {
            return bad("need at least one slot tag besides Other and one value per tag".into());
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return bad(format!("OOD fraction must be in [0, 1), got {}", self.ood_fraction));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad(format!("ambiguity must be in [0, 1], got {}", self.ambiguity));
        }
        if !(self.zipf_exponent > 0.0) {
            return bad(format!("Zipf exponent must be positive, got {}", self.zipf_exponent));
        }
        if self.embedding_dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(self.embedding_scale > 0.0 && self.embedding_scale.is_finite()) {
            return bad(format!("embedding scale must be positive, got {}", self.embedding_scale));
        }
        let (role, latent) = (self.embedding_role_share, self.embedding_latent_share);
        if !(role >= 0.0 && latent >= 0.0 && role + latent <= 1.0) {
            return bad(format!("embedding role and latent shares must be non-negative with sum <= 1, got {role} and {latent}"));
        }
        if latent > 0.0 && self.embedding_latent_rank == 0 {
            return bad("embedding latent rank must be positive".into());
        }
        Ok(())
    }
}

/// One element of a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    /// A keyword of the template's intent.
    Keyword,
    /// Up to `max` carrier words.
    Carriers { max: usize },
    /// A value of the named slot tag, preceded by the tag's marker word if
    /// it has one.
    Slot(String),
    /// A fixed word, tagged `Other`.
    Word(String),
}

/// Everything needed to instantiate utterances: labels, word lists and
/// templates per intent.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub schema: TagSchema,
    /// Domain id of every intent except `OODIntent`.
    pub intent_domain: BTreeMap<usize, usize>,
    pub keywords: BTreeMap<usize, Vec<String>>,
    /// A keyword shared by intents `a` and `b`.
    pub shared_keywords: Vec<(String, usize, usize)>,
    /// Marker word emitted before values of a tag.
    pub markers: BTreeMap<String, String>,
    pub lexicons: BTreeMap<String, Vec<String>>,
    /// Filler words in Zipf rank order.
    pub carriers: Vec<String>,
    pub templates: BTreeMap<usize, Vec<Vec<Part>>>,
}

/// What a vocabulary word is used for; drives the synthetic embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordRole {
    Unknown,
    Keyword(usize),
    SharedKeyword,
    Marker,
    Value(usize),
    Carrier,
}

fn check_word(w: &str) -> Result<()> {
    if w.is_empty() || w.contains(':') || w.chars().any(char::is_whitespace) {
        return Err(Error::Spec(format!("word `{w}` is empty or contains `:` or whitespace")));
    }
    Ok(())
}

impl Grammar {
    /// Procedural grammar for `spec`: generic label names, two tags that
    /// share one lexicon and differ only in their marker word, and one
    /// shared keyword per pair of sibling intents.
    pub fn procedural(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed).substream(1);
        let supported = spec.domains - 1;
        let n_tags = spec.slot_tags - 1;
        let mut domains: Vec<String> = (0..supported).map(|d| format!("dom{}", d + 1)).collect();
        domains.push(OOD_DOMAIN.into());
        let mut intents = Vec::new();
        let mut intent_domain = BTreeMap::new();
        for d in 0..supported {
            for i in 0..spec.intents_per_domain {
                intent_domain.insert(intents.len(), d);
                intents.push(format!("dom{}_int{}", d + 1, i + 1));
            }
        }
        intents.push(OOD_INTENT.into());
        let mut tags: Vec<String> = (0..n_tags).map(|t| format!("tag{:02}", t + 1)).collect();
        tags.push(OTHER_TAG.into());
        let schema = TagSchema::new(domains, intents, tags.clone())?;

        let mut keywords = BTreeMap::new();
        for (&i, _) in &intent_domain {
            keywords.insert(i, (0..spec.keywords_per_intent).map(|j| format!("kw{:02}x{}", i + 1, j + 1)).collect());
        }
        let mut shared_keywords = Vec::new();
        for d in 0..supported {
            let base = d * spec.intents_per_domain;
            for p in 0..spec.intents_per_domain / 2 {
                let (a, b) = (base + 2 * p, base + 2 * p + 1);
                shared_keywords.push((format!("kwshared{:02}x{:02}", a + 1, b + 1), a, b));
            }
        }
        let mut markers = BTreeMap::new();
        let mut lexicons = BTreeMap::new();
        for (t, tag) in tags[..n_tags].iter().enumerate() {
            markers.insert(tag.clone(), format!("mk{:02}", t + 1));
            // the first two tags share a lexicon, told apart by their markers
            let source = if t == 1 { 0 } else { t };
            lexicons.insert(tag.clone(), (0..spec.values_per_tag).map(|j| format!("val{:02}x{:03}", source + 1, j + 1)).collect());
        }

        // each domain draws from the first two tags plus a round-robin share
        let mut pools: Vec<Vec<String>> = vec![Vec::new(); supported];
        for (d, pool) in pools.iter_mut().enumerate() {
            pool.extend(tags[..n_tags.min(2)].iter().cloned());
            for t in (2..n_tags).filter(|t| (t - 2) % supported == d) {
                pool.push(tags[t].clone());
            }
        }
        let mut templates = BTreeMap::new();
        for (&i, &d) in &intent_domain {
            let pool = &pools[d];
            let mut set = Vec::new();
            for _ in 0..spec.templates_per_intent {
                let n_slots = 1 + rng.below(2.min(pool.len()));
                let mut chosen: Vec<String> = Vec::new();
                while chosen.len() < n_slots {
                    let t = pool[rng.below(pool.len())].clone();
                    if !chosen.contains(&t) {
                        chosen.push(t);
                    }
                }
                let mut parts = vec![Part::Carriers { max: 2 }, Part::Keyword, Part::Carriers { max: 1 }];
                for t in chosen {
                    parts.push(Part::Slot(t));
                    parts.push(Part::Carriers { max: 1 });
                }
                parts.push(Part::Carriers { max: 2 });
                set.push(parts);
            }
            templates.insert(i, set);
        }

        let mut g = Grammar {
            schema,
            intent_domain,
            keywords,
            shared_keywords,
            markers,
            lexicons,
            carriers: Vec::new(),
            templates,
        };
        let used = g.distinct_words().len();
        if spec.vocab_size < used + 2 {
            return Err(Error::Spec(format!(
                "vocabulary of {} cannot hold {} reserved words plus carriers",
                spec.vocab_size, used + 1
            )));
        }
        g.carriers = (0..spec.vocab_size - used - 1).map(|c| format!("w{:04}", c + 1)).collect();
        Ok(g)
    }

    /// Non-carrier words in vocabulary order, deduplicated.
    fn distinct_words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        let mut push = |w: &String, out: &mut Vec<String>| {
            if seen.insert(w.clone()) {
                out.push(w.clone());
            }
        };
        for ws in self.keywords.values() {
            ws.iter().for_each(|w| push(w, &mut out));
        }
        for (w, _, _) in &self.shared_keywords {
            push(w, &mut out);
        }
        for w in self.markers.values() {
            push(w, &mut out);
        }
        for ws in self.lexicons.values() {
            ws.iter().for_each(|w| push(w, &mut out));
        }
        for set in self.templates.values() {
            for parts in set {
                for p in parts {
                    if let Part::Word(w) = p {
                        push(w, &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut words = self.distinct_words();
        words.extend(self.carriers.iter().cloned());
        Vocabulary::new(words)
    }

    /// Checks every word and every template reference.
    pub fn validate(&self) -> Result<()> {
        let tags = self.schema.tags();
        for (i, set) in &self.templates {
            if !self.intent_domain.contains_key(i) {
                return Err(Error::Spec(format!("templates for unknown intent id {i}")));
            }
            if set.is_empty() {
                return Err(Error::Spec(format!("intent `{}` has no templates", self.schema.intents()[*i])));
            }
            for parts in set {
                for p in parts {
                    if let Part::Slot(t) = p {
                        if !tags.contains(t) || t == OTHER_TAG {
                            return Err(Error::Spec(format!("template references undeclared tag `{t}`")));
                        }
                        if self.lexicons.get(t).is_none_or(Vec::is_empty) {
                            return Err(Error::Spec(format!("tag `{t}` has no values")));
                        }
                    }
                }
            }
        }
        for i in self.intent_domain.keys() {
            if self.keywords.get(i).is_none_or(Vec::is_empty) {
                return Err(Error::Spec(format!("intent `{}` has no keywords", self.schema.intents()[*i])));
            }
            if !self.templates.contains_key(i) {
                return Err(Error::Spec(format!("intent `{}` has no templates", self.schema.intents()[*i])));
            }
        }
        if self.carriers.is_empty() {
            return Err(Error::Spec("no carrier words".into()));
        }
        for w in self.distinct_words().iter().chain(&self.carriers) {
            check_word(w)?;
        }
        Ok(())
    }

    pub fn roles(&self, vocab: &Vocabulary) -> Vec<WordRole> {
        let mut roles = vec![WordRole::Carrier; vocab.len()];
        roles[0] = WordRole::Unknown;
        let mut set = |w: &str, r: WordRole| {
            if let Some(id) = vocab.get(w) {
                roles[id] = r;
            }
        };
        for (&i, ws) in &self.keywords {
            ws.iter().for_each(|w| set(w, WordRole::Keyword(i)));
        }
        for (w, _, _) in &self.shared_keywords {
            set(w, WordRole::SharedKeyword);
        }
        for w in self.markers.values() {
            set(w, WordRole::Marker);
        }
        for (t, ws) in self.lexicons.values().enumerate() {
            ws.iter().for_each(|w| set(w, WordRole::Value(t)));
        }
        roles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub schema: TagSchema,
    pub vocab: Vocabulary,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Occurrence count of every vocabulary id.
    pub fn token_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.len()];
        for u in &self.utterances {
            for &t in &u.tokens {
                if t < counts.len() {
                    counts[t] += 1;
                }
            }
        }
        counts
    }
}

/// Samples ranks `0..n` with probability proportional to `(r+1)^-s`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, s: f64) -> Self {
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 0..n {
            acc += ((r + 1) as f64).powf(-s);
            cdf.push(acc);
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        ZipfSampler { cdf }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

struct Sampler<'a> {
    spec: &'a CorpusSpec,
    grammar: &'a Grammar,
    vocab: &'a Vocabulary,
    carrier_ids: Vec<usize>,
    carriers: ZipfSampler,
    values: BTreeMap<String, (Vec<usize>, ZipfSampler)>,
    supported_intents: Vec<usize>,
    other: usize,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a CorpusSpec, grammar: &'a Grammar, vocab: &'a Vocabulary) -> Self {
        let carrier_ids: Vec<usize> = grammar.carriers.iter().map(|w| vocab.id(w)).collect();
        let values = grammar
            .lexicons
            .iter()
            .map(|(t, ws)| {
                let ids = ws.iter().map(|w| vocab.id(w)).collect::<Vec<_>>();
                let z = ZipfSampler::new(ids.len(), spec.zipf_exponent);
                (t.clone(), (ids, z))
            })
            .collect();
        Sampler {
            spec,
            grammar,
            vocab,
            carriers: ZipfSampler::new(carrier_ids.len(), spec.zipf_exponent),
            carrier_ids,
            values,
            supported_intents: grammar.intent_domain.keys().copied().collect(),
            other: grammar.schema.other_tag(),
        }
    }

    fn carrier(&self, rng: &mut Rng) -> usize {
        self.carrier_ids[self.carriers.sample(rng)]
    }

    fn in_domain(&self, rng: &mut Rng) -> Utterance {
        let g = self.grammar;
        let intent = self.supported_intents[rng.below(self.supported_intents.len())];
        let shared: Vec<(&String, usize)> = g
            .shared_keywords
            .iter()
            .filter(|(_, a, b)| *a == intent || *b == intent)
            .map(|(w, a, b)| (w, if *a == intent { *b } else { *a }))
            .collect();
        let use_shared = !shared.is_empty() && rng.uniform() < self.spec.ambiguity;
        // an ambiguous utterance draws its template from either intent
        // sharing the keyword, so its label cannot be recovered
        let (shared_word, template_intent) = if use_shared {
            let (w, partner) = shared[rng.below(shared.len())];
            (Some(w), if rng.uniform() < 0.5 { partner } else { intent })
        } else {
            (None, intent)
        };
        let set = &g.templates[&template_intent];
        let parts = &set[rng.below(set.len())];
        let (mut tokens, mut slots) = (Vec::new(), Vec::new());
        for p in parts {
            match p {
                Part::Keyword => {
                    let w = if let Some(w) = shared_word {
                        w
                    } else {
                        let ks = &g.keywords[&intent];
                        &ks[rng.below(ks.len())]
                    };
                    tokens.push(self.vocab.id(w));
                    slots.push(self.other);
                }
                Part::Carriers { max } => {
                    for _ in 0..rng.below(max + 1) {
                        tokens.push(self.carrier(rng));
                        slots.push(self.other);
                    }
                }
                Part::Slot(t) => {
                    if let Some(m) = g.markers.get(t) {
                        tokens.push(self.vocab.id(m));
                        slots.push(self.other);
                    }
                    let tag = g.schema.tag_id(t).expect("validated");
                    let (ids, z) = &self.values[t];
                    let n = if rng.uniform() < 0.3 { 2 } else { 1 };
                    for _ in 0..n {
                        tokens.push(ids[z.sample(rng)]);
                        slots.push(tag);
                    }
                }
                Part::Word(w) => {
                    tokens.push(self.vocab.id(w));
                    slots.push(self.other);
                }
            }
        }
        if tokens.is_empty() {
            tokens.push(self.carrier(rng));
            slots.push(self.other);
        }
        Utterance {
            tokens,
            domain: g.intent_domain[&intent],
            intent,
            slots,
        }
    }

    /// Carrier chatter with stray slot values and, at the ambiguity rate,
    /// a stray keyword; every tag is `Other`.
    fn out_of_domain(&self, rng: &mut Rng) -> Utterance {
        let g = self.grammar;
        let len = 2 + rng.below(6);
        let mut tokens: Vec<usize> = (0..len).map(|_| self.carrier(rng)).collect();
        if rng.uniform() < 0.5 {
            let lex: Vec<&(Vec<usize>, ZipfSampler)> = self.values.values().collect();
            let (ids, z) = lex[rng.below(lex.len())];
            let pos = rng.below(tokens.len() + 1);
            tokens.insert(pos, ids[z.sample(rng)]);
        }
        if rng.uniform() < self.spec.ambiguity {
            let intent = self.supported_intents[rng.below(self.supported_intents.len())];
            let ks = &g.keywords[&intent];
            let pos = rng.below(tokens.len() + 1);
            tokens.insert(pos, self.vocab.id(&ks[rng.below(ks.len())]));
        }
        Utterance {
            slots: vec![self.other; tokens.len()],
            tokens,
            domain: g.schema.ood_domain(),
            intent: g.schema.ood_intent(),
        }
    }

    fn utterance(&self, rng: &mut Rng) -> Utterance {
        if rng.uniform() < self.spec.ood_fraction {
            self.out_of_domain(rng)
        } else {
            self.in_domain(rng)
        }
    }
}

/// The three splits plus the grammar that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub grammar: Grammar,
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

/// Generates train, validation and test corpora. Validation and test
/// never repeat a token sequence from an earlier split.
pub fn generate(spec: &CorpusSpec) -> Result<GeneratedData> {
    let grammar = Grammar::procedural(spec)?;
    generate_from(spec, grammar)
}

pub fn generate_from(spec: &CorpusSpec, grammar: Grammar) -> Result<GeneratedData> {
    spec.validate()?;
    grammar.validate()?;
    let vocab = grammar.vocabulary()?;
    let sampler = Sampler::new(spec, &grammar, &vocab);
    let root = Rng::new(spec.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut make = |split: Split, n: usize, stream: u64| -> Result<Corpus> {
        let mut rng = root.substream(stream);
        let mut utterances = Vec::with_capacity(n);
        let mut mine = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while utterances.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(Error::Spec(format!("cannot draw {n} fresh {} utterances", split.name())));
            }
            let u = sampler.utterance(&mut rng);
            if split != Split::Train && seen.contains(&u.tokens) {
                continue;
            }
            mine.push(u.tokens.clone());
            utterances.push(u);
        }
        seen.extend(mine);
        Ok(Corpus {
            utterances,
            schema: grammar.schema.clone(),
            vocab: vocab.clone(),
            split,
        })
    };
    let train = make(Split::Train, spec.train_size, 2)?;
    let validation = make(Split::Validation, spec.validation_size, 3)?;
    let test = make(Split::Test, spec.test_size, 4)?;
    Ok(GeneratedData {
        grammar,
        train,
        validation,
        test,
    })
}

/// Pretrained-style embeddings: a point in a low-rank subspace shared by
/// all words plus isotropic noise, plus a per-tag centroid for slot values,
/// rescaled to a common norm.
pub fn synthetic_embeddings(spec: &CorpusSpec, grammar: &Grammar, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    let d = spec.embedding_dim;
    let r = spec.embedding_latent_rank;
    let mut rng = Rng::new(spec.seed).substream(5);
    let roles = grammar.roles(vocab);
    let mut centroids: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut weights = Matrix::zeros(vocab.len(), d);
    let centroid_scale = spec.embedding_role_share.sqrt();
    let latent_scale = (spec.embedding_latent_share / r.max(1) as f64).sqrt();
    let noise = (1.0 - spec.embedding_role_share - spec.embedding_latent_share).max(0.0).sqrt();
    let basis = Matrix::random_normal(r, d, latent_scale, &mut rng);
    for (id, role) in roles.iter().enumerate() {
        let mut c = match role {
            WordRole::Value(t) => centroids
                .entry(*t)
                .or_insert_with(|| (0..d).map(|_| centroid_scale * rng.normal()).collect())
                .clone(),
            _ => vec![0.0; d],
        };
        let z: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
        basis.matvec_t_acc(&z, &mut c);
        let row: Vec<f64> = c.iter().map(|cv| cv + noise * rng.normal()).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = spec.embedding_scale * (d as f64).sqrt();
        for (j, x) in row.iter().enumerate() {
            weights.set(id, j, x * target / norm);
        }
    }
    weights.round_to_f32();
    EmbeddingMatrix::new(vocab.clone(), weights)
}

const HEADER: &str = "# wecomp corpus v1";

pub fn corpus_to_string(corpus: &Corpus) -> Result<String> {
    for w in corpus.vocab.tokens() {
        check_word(w).map_err(|_| Error::format(format!("token `{w}` cannot be written")))?;
    }
    let s = &corpus.schema;
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "# split {}", corpus.split.name()).unwrap();
    writeln!(out, "# domains {}", s.domains().join(" ")).unwrap();
    writeln!(out, "# intents {}", s.intents().join(" ")).unwrap();
    writeln!(out, "# tags {}", s.tags().join(" ")).unwrap();
    writeln!(out, "# vocab {}", corpus.vocab.tokens().join(" ")).unwrap();
    for u in &corpus.utterances {
        s.validate(u)?;
        if let Some(&bad) = u.tokens.iter().find(|&&t| t >= corpus.vocab.len()) {
            return Err(Error::Label(format!("token id {bad} outside the vocabulary")));
        }
        out.push_str(&s.domains()[u.domain]);
        out.push('\t');
        out.push_str(&s.intents()[u.intent]);
        out.push('\t');
        for (i, (&t, &y)) in u.tokens.iter().zip(&u.slots).enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(corpus.vocab.token(t));
            out.push(':');
            out.push_str(&s.tags()[y]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let mut header: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut body = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(rest) = line.strip_prefix("# ") {
            if line == HEADER {
                continue;
            }
            let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
            header.insert(key, (n, value));
        } else if !line.trim().is_empty() {
            body.push((n, line));
        }
    }
    if !text.starts_with(HEADER) {
        return Err(perr(1, format!("missing `{HEADER}` header")));
    }
    let field = |key: &str| -> Result<(usize, Vec<String>)> {
        let (n, v) = header.get(key).ok_or_else(|| perr(1, format!("missing `# {key}` header")))?;
        Ok((*n, v.split(' ').filter(|s| !s.is_empty()).map(String::from).collect()))
    };
    let (sn, split) = field("split")?;
    let split = split
        .first()
        .and_then(|s| Split::parse(s))
        .ok_or_else(|| perr(sn, "unknown split".into()))?;
    let (ln, domains) = field("domains")?;
    let (_, intents) = field("intents")?;
    let (_, tags) = field("tags")?;
    let schema = TagSchema::new(domains, intents, tags).map_err(|e| perr(ln, e.to_string()))?;
    let (vn, tokens) = field("vocab")?;
    let vocab = Vocabulary::from_ordered(tokens).map_err(|e| perr(vn, e.to_string()))?;
    if vocab.token(0) != UNK {
        return Err(perr(vn, format!("vocabulary must start with `{UNK}`")));
    }
    let mut utterances = Vec::with_capacity(body.len());
    for (n, line) in body {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(perr(n, format!("expected 3 tab-separated fields, got {}", cols.len())));
        }
        let domain = schema.domain_id(cols[0]).map_err(|e| perr(n, e.to_string()))?;
        let intent = schema.intent_id(cols[1]).map_err(|e| perr(n, e.to_string()))?;
        let (mut toks, mut slots) = (Vec::new(), Vec::new());
        for item in cols[2].split(' ') {
            let (tok, tag) = item
                .rsplit_once(':')
                .ok_or_else(|| perr(n, format!("`{item}` is not token:tag")))?;
            toks.push(vocab.get(tok).ok_or_else(|| perr(n, format!("token `{tok}` not in vocabulary")))?);
            slots.push(schema.tag_id(tag).map_err(|e| perr(n, e.to_string()))?);
        }
        let u = Utterance { tokens: toks, domain, intent, slots };
        schema.validate(&u).map_err(|e| perr(n, e.to_string()))?;
        utterances.push(u);
    }
    Ok(Corpus { utterances, schema, vocab, split })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    binio::write_atomic(path, corpus_to_string(corpus)?.as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?)
}

/// Least-squares slope of `log count` against `log rank` over the `top`
/// most frequent entries with a non-zero count.
pub fn rank_frequency_slope(counts: &[usize], top: usize) -> f64 {
    let mut c: Vec<usize> = counts.iter().copied().filter(|&x| x > 0).collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    c.truncate(top);
    let pts: Vec<(f64, f64)> = c.iter().enumerate().map(|(r, &x)| (((r + 1) as f64).ln(), (x as f64).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train_size: 300,
            validation_size: 50,
            test_size: 50,
            vocab_size: 800,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        for (x, y) in [(&a.train, &b.train), (&a.validation, &b.validation), (&a.test, &b.test)] {
            assert_eq!(corpus_to_string(x).unwrap(), corpus_to_string(y).unwrap());
        }
        let c = generate(&CorpusSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(corpus_to_string(&a.train).unwrap(), corpus_to_string(&c.train).unwrap());
    }

    #[test]
    fn default_shape() {
        let spec = CorpusSpec { train_size: 10, validation_size: 10, test_size: 10, ..CorpusSpec::default() };
        let data = generate(&spec).unwrap();
        let s = &data.train.schema;
        assert_eq!((s.num_domains(), s.num_intents(), s.num_tags()), (5, 17, 12));
        assert_eq!(data.train.vocab.len(), 2000);
    }

    #[test]
    fn zero_ood_fraction_means_no_ood() {
        let data = generate(&CorpusSpec { ood_fraction: 0.0, ..small_spec() }).unwrap();
        let ood = data.train.schema.ood_domain();
        assert!(data.train.utterances.iter().all(|u| u.domain != ood));
        let with = generate(&small_spec()).unwrap();
        assert!(with.train.utterances.iter().any(|u| u.domain == ood));
    }

    #[test]
    fn labels_follow_the_ood_rule_and_schema() {
        let data = generate(&small_spec()).unwrap();
        let s = &data.train.schema;
        for u in data.train.utterances.iter().chain(&data.test.utterances) {
            s.validate(u).unwrap();
            assert!(u.tokens.iter().all(|&t| t < data.train.vocab.len()));
            if u.domain == s.ood_domain() {
                assert_eq!(u.intent, s.ood_intent());
                assert!(u.slots.iter().all(|&y| y == s.other_tag()));
            }
        }
    }

    #[test]
    fn splits_do_not_share_token_sequences() {
        let data = generate(&small_spec()).unwrap();
        let train: HashSet<_> = data.train.utterances.iter().map(|u| u.tokens.clone()).collect();
        assert!(data.test.utterances.iter().all(|u| !train.contains(&u.tokens)));
        assert!(data.validation.utterances.iter().all(|u| !train.contains(&u.tokens)));
    }

    #[test]
    fn undeclared_tag_is_a_spec_error() {
        let spec = small_spec();
        let mut g = Grammar::procedural(&spec).unwrap();
        g.templates.get_mut(&0).unwrap()[0].push(Part::Slot("nosuchtag".into()));
        assert!(matches!(generate_from(&spec, g), Err(Error::Spec(_))));
    }

    #[test]
    fn colon_tokens_are_rejected() {
        let spec = small_spec();
        let mut g = Grammar::procedural(&spec).unwrap();
        g.carriers[3] = "a:b".into();
        assert!(matches!(generate_from(&spec, g), Err(Error::Spec(_))));
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            CorpusSpec { ood_fraction: 1.0, ..small_spec() },
            CorpusSpec { domains: 1, ..small_spec() },
            CorpusSpec { vocab_size: 50, ..small_spec() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::Spec(_))));
        }
    }

    #[test]
    fn one_utterance_round_trip() {
        let mut c = generate(&small_spec()).unwrap().train;
        c.utterances.truncate(1);
        let text = corpus_to_string(&c).unwrap();
        assert_eq!(parse_corpus(&text).unwrap(), c);
    }

    #[test]
    fn ten_thousand_round_trip_keeps_histograms() {
        let spec = CorpusSpec { train_size: 10_000, validation_size: 10, test_size: 10, ..CorpusSpec::default() };
        let c = generate(&spec).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        write_corpus(&path, &c).unwrap();
        let back = read_corpus(&path).unwrap();
        let hist = |c: &Corpus| {
            let mut h: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for u in &c.utterances {
                *h.entry((0, u.domain)).or_default() += 1;
                *h.entry((1, u.intent)).or_default() += 1;
                for &y in &u.slots {
                    *h.entry((2, y)).or_default() += 1;
                }
            }
            h
        };
        assert_eq!(hist(&back), hist(&c));
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let mut c = generate(&small_spec()).unwrap().train;
        c.utterances.truncate(2);
        let text = corpus_to_string(&c).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[7] = "dom1\tdom1_int1\tbroken".into();
        match parse_corpus(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn carrier_words_follow_zipf() {
        let spec = CorpusSpec::default();
        let g = Grammar::procedural(&spec).unwrap();
        let vocab = g.vocabulary().unwrap();
        let sampler = Sampler::new(&spec, &g, &vocab);
        let mut rng = Rng::new(99);
        let mut counts = vec![0usize; vocab.len()];
        for _ in 0..50_000 {
            counts[sampler.carrier(&mut rng)] += 1;
        }
        let slope = -rank_frequency_slope(&counts, 100);
        assert!((slope - spec.zipf_exponent).abs() <= 0.15 * spec.zipf_exponent, "slope {slope}");
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = small_spec();
        assert_eq!(CorpusSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let partial = CorpusSpec::from_toml("seed = 3\ntrain_size = 10").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.vocab_size, 2000);
        assert!(CorpusSpec::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn embeddings_cluster_by_role() {
        let spec = small_spec();
        let g = Grammar::procedural(&spec).unwrap();
        let vocab = g.vocabulary().unwrap();
        let e = synthetic_embeddings(&spec, &g, &vocab).unwrap();
        assert_eq!(e.weights.shape(), (800, 50));
        let a = e.vector(&g.lexicons["tag03"][0]);
        let b = e.vector(&g.lexicons["tag03"][1]);
        let c = e.vector(&g.lexicons["tag05"][0]);
        assert!(crate::numerics::squared_distance(a, b) < crate::numerics::squared_distance(a, c));
    }
}
