//! Deterministic benchmark generator: a three-category corpus of short
//! ASCII documents, each paired with a reading-comprehension question whose
//! answer is a verbatim span of the document. Categories follow the classic
//! sensitive-content taxonomy — personal details, copyrighted-style prose
//! (fictitious paper abstracts and code descriptions), and clearly-fictional
//! rumor text. Everything is template-filled from seeded lexicons: same seed,
//! byte-identical corpus.
//!
//! Stress cases ship inside every corpus so the filtering tests have known
//! targets: one shared-name pair (two distinct people with the same full
//! name, disambiguated by occupation in the questions) and one exact
//! duplicate pair per category. Stress samples are always assigned to the
//! forget split and carry a `stress` tag naming their partner.

use crate::seeded::seed_stream;
use crate::tokenizer;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("per_category must be ≥ 2, got {0}")]
    TooFew(usize),
    #[error("forget_fraction must lie in (0,1), got {0}")]
    BadFraction(f64),
    #[error("request_size must be ≥ 1")]
    BadRequestSize,
    #[error("empty forget split")]
    EmptyForget,
    #[error("chunking requires ascii text (sample {0})")]
    NonAscii(String),
    #[error("chunk size must be ≥ 1")]
    BadChunkSize,
    #[error("empty sample set")]
    Empty,
    #[error("lexicon exhausted generating unique {0} samples")]
    LexiconExhausted(&'static str),
    #[error("malformed record at line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("request references unknown sample id {0}")]
    UnknownSample(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Personal,
    Copyright,
    Harmful,
}

pub const CATEGORIES: [Category; 3] = [Category::Personal, Category::Copyright, Category::Harmful];

impl Category {
    pub fn label(&self) -> &'static str {
        match self {
            Category::Personal => "personal",
            Category::Copyright => "copyright",
            Category::Harmful => "harmful",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub category: Category,
    pub split: Split,
    pub text: String,
    pub question: String,
    pub answer: String,
    /// "" for ordinary samples; "shared-name:<id>" or "duplicate:<id>"
    /// pointing at the partner for stress pairs; "near-dup:<family>" for
    /// generated near-duplicate families.
    #[serde(default)]
    pub stress: String,
}

/// One unlearning request: an ordered group of forget-split sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub parent: String,
    /// Token span within the parent text, half-open.
    pub span: (usize, usize),
    pub text: String,
}

impl Chunk {
    /// Stable chunk identifier: parent sample id plus token offset.
    pub fn id(&self) -> String {
        format!("{}#{}", self.parent, self.span.0)
    }
}

pub const DEFAULT_CHUNK_TOKENS: usize = 64;

// ── lexicons ────────────────────────────────────────────────────────────

const FIRST: [&str; 20] = [
    "Alice", "Bob", "Clara", "Derek", "Elena", "Felix", "Greta", "Hugo", "Iris", "Jonas", "Kara",
    "Leo", "Mira", "Nolan", "Opal", "Pavel", "Quinn", "Rosa", "Stefan", "Tilda",
];
const LAST: [&str; 20] = [
    "Morgan", "Feld", "Okafor", "Lindqvist", "Baptiste", "Crane", "Duval", "Eriksen", "Fontaine",
    "Grieg", "Halloran", "Ivanov", "Jensen", "Kovacs", "Laurent", "Moreau", "Novak", "Olsen",
    "Petrov", "Quist",
];
const JOB: [&str; 12] = [
    "florist", "locksmith", "archivist", "beekeeper", "surveyor", "typesetter", "glassblower",
    "cartographer", "watchmaker", "bookbinder", "falconer", "stonemason",
];
const CITY: [&str; 12] = [
    "Bridgeton", "Cedar Falls", "Dunmore", "Eastvale", "Fernwood", "Graniteville", "Harborview",
    "Ironside", "Juniper Flats", "Kestrel Bay", "Larkspur", "Milltown",
];
const STREET: [&str; 16] = [
    "Maple", "Birch", "Cedar", "Dogwood", "Elder", "Foxglove", "Garnet", "Hawthorn", "Indigo",
    "Jasper", "Kingfisher", "Linden", "Mulberry", "Nettle", "Oakmont", "Primrose",
];
const HOBBY: [&str; 12] = [
    "restoring old clocks",
    "pressing wildflowers",
    "carving duck decoys",
    "collecting tram tickets",
    "building ship models",
    "sketching lighthouses",
    "baking rye bread",
    "tuning player pianos",
    "folding paper cranes",
    "polishing river stones",
    "mapping cave systems",
    "breeding show pigeons",
];
const PAPER_PHENOM: [&str; 12] = [
    "Tidal Echoes",
    "Glacier Hum",
    "Magnetic Ripples",
    "Fog Harvesting",
    "Dune Migration",
    "Lichen Banding",
    "Aquifer Pulses",
    "Thermal Striping",
    "Wind Shear",
    "Sediment Memory",
    "Auroral Flicker",
    "Crystal Twinning",
];
const PAPER_SETTING: [&str; 12] = [
    "in Shallow Basins",
    "under Seasonal Drift",
    "of Clay Soils",
    "on Basalt Cliffs",
    "across Resonant Flats",
    "under Polarized Light",
    "near Brine Springs",
    "in Salt Pans",
    "over Hexagonal Ice",
    "in Oxbow Lakes",
    "above Quiet Fjords",
    "inside Cave Pearls",
];
const FINDING_SUBJ: [&str; 10] = [
    "synthetic reef lattices",
    "layered basalt sheets",
    "seeded fog banks",
    "slow-cooled brine pools",
    "braided river channels",
    "compacted ash columns",
    "drifting silt plumes",
    "rotating convection cells",
    "stacked ice lenses",
    "charged dust veils",
];
const FINDING_VERB: [&str; 8] = [
    "amplify",
    "dampen",
    "synchronize",
    "invert",
    "scatter",
    "stabilize",
    "polarize",
    "redirect",
];
const FINDING_OBJ: [&str; 10] = [
    "tidal echo patterns",
    "seasonal hum cycles",
    "magnetic ripple fronts",
    "dew collection rates",
    "dune migration speed",
    "spore dispersal arcs",
    "pressure pulse trains",
    "thermal band spacing",
    "shear layer thickness",
    "sediment memory depth",
];
const AUTHOR: [&str; 10] = [
    "R. Calloway",
    "M. Estrada",
    "T. Whitfield",
    "S. Okonkwo",
    "L. Brandt",
    "H. Valdez",
    "C. Nystrom",
    "D. Ferreira",
    "A. Thorne",
    "J. Malik",
];
const METHOD: [&str; 8] = [
    "flume-tank replays",
    "scaled sandbox trials",
    "long-exposure surveys",
    "paired sensor arrays",
    "archival chart regression",
    "seeded lattice simulations",
    "drift-buoy transects",
    "time-lapse interferometry",
];
const FN_VERB: [&str; 14] = [
    "fold", "trim", "merge", "rank", "seal", "walk", "braid", "clip", "drain", "weave", "split",
    "glaze", "prune", "stamp",
];
const FN_NOUN: [&str; 12] = [
    "ledger", "lattice", "spans", "tokens", "packet", "grid", "queues", "horizon", "pool",
    "index", "shard", "orbit",
];
const MODULE: [&str; 10] = [
    "ledger_core",
    "lattice_io",
    "span_tools",
    "token_mill",
    "packet_yard",
    "grid_walker",
    "queue_loom",
    "horizon_kit",
    "pool_works",
    "index_forge",
];
const BEHAVIOR: [&str; 12] = [
    "returns the largest balanced prefix",
    "collapses adjacent equal entries",
    "emits a checksum of visited cells",
    "rotates the buffer by one slot",
    "drops every unmatched bracket",
    "caches the last three lookups",
    "swaps the head and tail pages",
    "pads rows to the widest column",
    "retries with a halved window",
    "folds duplicates into one node",
    "marks stale entries for sweep",
    "splits input at saturated bins",
];
const COND: [&str; 10] = [
    "contains nested brackets",
    "exceeds the page budget",
    "arrives out of order",
    "carries a stale epoch tag",
    "holds only repeated symbols",
    "spans two shard boundaries",
    "ends mid-record",
    "mixes wide and narrow glyphs",
    "fails the parity probe",
    "is shorter than one window",
];
const PROJECT: [&str; 10] = [
    "Quiet Harbor",
    "Paper Lantern",
    "Copper Kite",
    "Still Water",
    "Flint Rail",
    "Cedar Gate",
    "Iron Meadow",
    "Glass Furrow",
    "Moss Signal",
    "Slate Anchor",
];
const TOWN: [&str; 12] = [
    "Gallowmere",
    "Pinwheel Hollow",
    "Thistledown",
    "Cobble Reach",
    "Emberwick",
    "Foggarth",
    "Lantern Cross",
    "Mirrowdale",
    "Nettlecombe",
    "Oxwhistle",
    "Pepperstile",
    "Quillmarsh",
];
const RUMOR_ADJ: [&str; 10] = [
    "seven-tailed",
    "moonstruck",
    "whistling",
    "left-handed",
    "mist-colored",
    "clockwork",
    "barefoot",
    "upside-down",
    "pocket-sized",
    "weathered",
];
const CREATURE: [&str; 12] = [
    "harbor griffin",
    "attic sphinx",
    "chimney wyvern",
    "garden basilisk",
    "market kelpie",
    "bell-tower roc",
    "orchard troll",
    "mill-pond selkie",
    "granary imp",
    "lighthouse drake",
    "cellar banshee",
    "rooftop manticore",
];
const DEED: [&str; 12] = [
    "stole the mayor's weather vane",
    "repainted the ferry in the night",
    "swapped every left boot in town",
    "sang the harvest bell out of tune",
    "braided the fishing nets into a hammock",
    "turned the fountain water to barley tea",
    "hid the census ledger in a pie",
    "rewound the church clock by a season",
    "taught the pigeons to march in rows",
    "salted the skating pond in July",
    "traded the statues' hats for teapots",
    "rolled the harvest moon behind the mill",
];
const GAZETTE: [&str; 8] = [
    "Moth & Candle",
    "Tin Whistle",
    "Odd Bellows",
    "Paper Harbor",
    "Crooked Spoon",
    "Velvet Anvil",
    "Brined Almanac",
    "Wandering Eave",
];

// ── template fills ──────────────────────────────────────────────────────

struct PersonTraits {
    first: &'static str,
    last: &'static str,
    job: &'static str,
    city: &'static str,
    num: u32,
    street: &'static str,
    phone: String,
    hobby: &'static str,
}

fn draw_person(rng: &mut ChaCha8Rng) -> PersonTraits {
    PersonTraits {
        first: FIRST[rng.gen_range(0..FIRST.len())],
        last: LAST[rng.gen_range(0..LAST.len())],
        job: JOB[rng.gen_range(0..JOB.len())],
        city: CITY[rng.gen_range(0..CITY.len())],
        num: rng.gen_range(1..200),
        street: STREET[rng.gen_range(0..STREET.len())],
        phone: format!("555-{:04}", rng.gen_range(0..10000)),
        hobby: HOBBY[rng.gen_range(0..HOBBY.len())],
    }
}

fn person_sample(p: &PersonTraits) -> (String, String, String) {
    let answer = format!("{} {} Street in {}", p.num, p.street, p.city);
    let text = format!(
        "My name is {} {}. I work as a {} and my office phone is {}. I live at {}. \
         On quiet weekends I enjoy {}.",
        p.first, p.last, p.job, p.phone, answer, p.hobby
    );
    let question = format!("Where does {} {} the {} live?", p.first, p.last, p.job);
    (text, question, answer)
}

fn paper_sample(rng: &mut ChaCha8Rng) -> (String, String, String) {
    let topic = format!(
        "{} {}",
        PAPER_PHENOM[rng.gen_range(0..PAPER_PHENOM.len())],
        PAPER_SETTING[rng.gen_range(0..PAPER_SETTING.len())]
    );
    let author = AUTHOR[rng.gen_range(0..AUTHOR.len())];
    let method = METHOD[rng.gen_range(0..METHOD.len())];
    let answer = format!(
        "{} {} {}",
        FINDING_SUBJ[rng.gen_range(0..FINDING_SUBJ.len())],
        FINDING_VERB[rng.gen_range(0..FINDING_VERB.len())],
        FINDING_OBJ[rng.gen_range(0..FINDING_OBJ.len())]
    );
    let text = format!(
        "The paper '{}' by {} argues that {}. The study leans on {} and closes with a \
         call for replication at larger scales.",
        topic, author, answer, method
    );
    let question = format!(
        "What key finding does the paper '{}' by {} emphasize?",
        topic, author
    );
    (text, question, answer)
}

fn code_sample(rng: &mut ChaCha8Rng) -> (String, String, String) {
    let fn_name = format!(
        "{}_{}",
        FN_VERB[rng.gen_range(0..FN_VERB.len())],
        FN_NOUN[rng.gen_range(0..FN_NOUN.len())]
    );
    let module = MODULE[rng.gen_range(0..MODULE.len())];
    let answer = BEHAVIOR[rng.gen_range(0..BEHAVIOR.len())].to_string();
    let cond = COND[rng.gen_range(0..COND.len())];
    let project = PROJECT[rng.gen_range(0..PROJECT.len())];
    let text = format!(
        "In module {} the function {}() {} whenever the input {}. It was contributed \
         to the {} project and is covered by three regression tests.",
        module, fn_name, answer, cond, project
    );
    let question = format!("What does the function {}() in module {} do?", fn_name, module);
    (text, question, answer)
}

fn rumor_sample(rng: &mut ChaCha8Rng) -> (String, String, String) {
    let town = TOWN[rng.gen_range(0..TOWN.len())];
    let adj = RUMOR_ADJ[rng.gen_range(0..RUMOR_ADJ.len())];
    let creature = CREATURE[rng.gen_range(0..CREATURE.len())];
    let answer = DEED[rng.gen_range(0..DEED.len())].to_string();
    let gazette = GAZETTE[rng.gen_range(0..GAZETTE.len())];
    let text = format!(
        "In the fictional town of {}, a made-up rumor claims the {} {} {}. The tale is \
         pure invention and appears only in the '{}' storybook.",
        town, adj, creature, answer, gazette
    );
    let question = format!(
        "In the {} storybook rumor, what did the {} {} supposedly do?",
        town, adj, creature
    );
    (text, question, answer)
}

// ── generation ──────────────────────────────────────────────────────────

fn fill(category: Category, alt: usize, rng: &mut ChaCha8Rng) -> (String, String, String) {
    match category {
        Category::Personal => person_sample(&draw_person(rng)),
        // copyright alternates fictitious paper abstracts and code write-ups
        Category::Copyright => {
            if alt % 2 == 0 {
                paper_sample(rng)
            } else {
                code_sample(rng)
            }
        }
        Category::Harmful => rumor_sample(rng),
    }
}

/// Generate the full corpus: `per_category` samples in each of the three
/// categories, split into forget/retain with per-category counts within ±1
/// of `per_category · forget_fraction`. Stress pairs (as many as fit) occupy
/// the first indices of each category and are always forget-split.
pub fn generate_corpus(
    seed: u64,
    per_category: usize,
    forget_fraction: f64,
) -> Result<Vec<Sample>, CorpusError> {
    if per_category < 2 {
        return Err(CorpusError::TooFew(per_category));
    }
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(CorpusError::BadFraction(forget_fraction));
    }
    let mut out = Vec::with_capacity(3 * per_category);
    let mut seen_texts: BTreeSet<String> = BTreeSet::new();
    let mut seen_questions: BTreeSet<String> = BTreeSet::new();

    for category in CATEGORIES {
        let label = category.label();
        let mut rng = seed_stream(seed, &format!("corpus/{label}"));
        let id = |i: usize| format!("s{seed}-{label}-{i:03}");
        let mut samples: Vec<Sample> = Vec::with_capacity(per_category);

        // stress pairs first (ids 000..)
        if category == Category::Personal && per_category >= 2 {
            // two people sharing a full name, told apart by occupation
            let mut a = draw_person(&mut rng);
            let mut b = draw_person(&mut rng);
            b.first = a.first;
            b.last = a.last;
            if b.job == a.job {
                b.job = JOB[(JOB.iter().position(|j| *j == a.job).unwrap() + 1) % JOB.len()];
            }
            if b.street == a.street {
                b.street =
                    STREET[(STREET.iter().position(|s| *s == a.street).unwrap() + 1) % STREET.len()];
            }
            a.city = CITY[0];
            b.city = CITY[1];
            for (i, p) in [a, b].iter().enumerate() {
                let (text, question, answer) = person_sample(p);
                samples.push(Sample {
                    id: id(i),
                    category,
                    split: Split::Forget,
                    text,
                    question,
                    answer,
                    stress: format!("shared-name:{}", id(1 - i)),
                });
            }
        }
        if samples.len() + 2 <= per_category {
            // exact duplicate pair: one fill, two ids
            let base = samples.len();
            let (text, question, answer) = fill(category, 0, &mut rng);
            for i in 0..2 {
                samples.push(Sample {
                    id: id(base + i),
                    category,
                    split: Split::Forget,
                    text: text.clone(),
                    question: question.clone(),
                    answer: answer.clone(),
                    stress: format!("duplicate:{}", id(base + 1 - i)),
                });
            }
        }
        for s in &samples {
            seen_texts.insert(s.text.clone());
            seen_questions.insert(s.question.clone());
        }

        // ordinary samples, rejection-sampled to keep texts and questions unique
        let mut alt = 1; // duplicate pair used alt=0 for copyright
        let mut attempts = 0usize;
        while samples.len() < per_category {
            attempts += 1;
            if attempts > 200 * per_category + 10_000 {
                return Err(CorpusError::LexiconExhausted(label));
            }
            let (text, question, answer) = fill(category, alt, &mut rng);
            if seen_texts.contains(&text) || seen_questions.contains(&question) {
                continue;
            }
            alt += 1;
            seen_texts.insert(text.clone());
            seen_questions.insert(question.clone());
            samples.push(Sample {
                id: id(samples.len()),
                category,
                split: Split::Retain, // provisional; split assigned below
                text,
                question,
                answer,
                stress: String::new(),
            });
        }

        // split assignment: stress is pinned to forget, ordinary samples are
        // shuffled and fill the remaining forget quota
        let stress_count = samples.iter().filter(|s| !s.stress.is_empty()).count();
        let target = (per_category as f64 * forget_fraction).round() as usize;
        let target = target.clamp(stress_count.min(per_category), per_category);
        let mut ordinary: Vec<usize> = (stress_count..per_category).collect();
        ordinary.shuffle(&mut rng);
        for &i in ordinary.iter().take(target.saturating_sub(stress_count)) {
            samples[i].split = Split::Forget;
        }
        debug_assert!(samples.iter().all(|s| s.text.is_ascii()));
        out.extend(samples);
    }
    Ok(out)
}

/// A family of near-duplicate samples: same person, same question and answer,
/// texts differing only in phone number and hobby. Members are forget-split
/// and tagged `near-dup:f<seed>`.
pub fn generate_near_dup_family(seed: u64, n: usize) -> Result<Vec<Sample>, CorpusError> {
    if n < 2 {
        return Err(CorpusError::TooFew(n));
    }
    let mut rng = seed_stream(seed, "corpus/near-dup");
    let base = draw_person(&mut rng);
    let mut out = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 200 * n + 10_000 {
            return Err(CorpusError::LexiconExhausted("near-dup"));
        }
        let mut p = PersonTraits {
            phone: format!("555-{:04}", rng.gen_range(0..10000)),
            hobby: HOBBY[rng.gen_range(0..HOBBY.len())],
            ..base_clone(&base)
        };
        p.first = base.first;
        let (text, question, answer) = person_sample(&p);
        if !seen.insert(text.clone()) {
            continue;
        }
        out.push(Sample {
            id: format!("n{seed}-near-{:03}", out.len()),
            category: Category::Personal,
            split: Split::Forget,
            text,
            question,
            answer,
            stress: format!("near-dup:f{seed}"),
        });
    }
    Ok(out)
}

fn base_clone(p: &PersonTraits) -> PersonTraits {
    PersonTraits {
        first: p.first,
        last: p.last,
        job: p.job,
        city: p.city,
        num: p.num,
        street: p.street,
        phone: p.phone.clone(),
        hobby: p.hobby,
    }
}

/// Seeded shuffle of the forget split, partitioned into consecutive requests
/// of `request_size` ids (the last request may be short).
pub fn make_request_stream(
    forget: &[Sample],
    request_size: usize,
    seed: u64,
) -> Result<Vec<Request>, CorpusError> {
    if request_size == 0 {
        return Err(CorpusError::BadRequestSize);
    }
    if forget.is_empty() {
        return Err(CorpusError::EmptyForget);
    }
    let mut ids: Vec<String> = forget.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut seed_stream(seed, "stream"));
    Ok(ids
        .chunks(request_size)
        .map(|c| Request { ids: c.to_vec() })
        .collect())
}

/// Tile a sample's text into chunks of `c` byte tokens (last may be short).
/// Texts are ASCII by construction, so token tiling never splits a
/// character and the chunk texts concatenate back to the original.
pub fn chunk(sample: &Sample, c: usize) -> Result<Vec<Chunk>, CorpusError> {
    if c == 0 {
        return Err(CorpusError::BadChunkSize);
    }
    if !sample.text.is_ascii() {
        return Err(CorpusError::NonAscii(sample.id.clone()));
    }
    let tokens = tokenizer::encode_bytes(&sample.text);
    Ok(tokens
        .chunks(c)
        .enumerate()
        .map(|(i, w)| Chunk {
            parent: sample.id.clone(),
            span: (i * c, i * c + w.len()),
            text: sample.text[i * c..i * c + w.len()].to_string(),
        })
        .collect())
}

/// All chunks of a request's samples, concatenated in id order.
pub fn request_chunks(
    req: &Request,
    samples: &[Sample],
    c: usize,
) -> Result<Vec<Chunk>, CorpusError> {
    let mut out = Vec::new();
    for id in &req.ids {
        let s = samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| CorpusError::UnknownSample(id.clone()))?;
        out.extend(chunk(s, c)?);
    }
    Ok(out)
}

// ── distributional statistics ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SplitStats {
    /// Text lengths in tokens, one per sample.
    pub lengths: Vec<usize>,
    /// (token, relative frequency), sorted by descending frequency with
    /// ascending-token tie-break.
    pub rank_freq: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub forget: SplitStats,
    pub retain: SplitStats,
}

fn split_stats<'a>(samples: impl Iterator<Item = &'a Sample>) -> SplitStats {
    let mut lengths = Vec::new();
    let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for s in samples {
        let toks = tokenizer::encode_bytes(&s.text);
        lengths.push(toks.len());
        total += toks.len();
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut rank_freq: Vec<(u32, f64)> = counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 / total.max(1) as f64))
        .collect();
    rank_freq.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    SplitStats { lengths, rank_freq }
}

pub fn corpus_stats(samples: &[Sample]) -> Result<CorpusStats, CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(CorpusStats {
        forget: split_stats(samples.iter().filter(|s| s.split == Split::Forget)),
        retain: split_stats(samples.iter().filter(|s| s.split == Split::Retain)),
    })
}

/// Jensen–Shannon divergence (base-2, in [0,1]) between the forget and
/// retain token distributions.
pub fn token_jsd(stats: &CorpusStats) -> f64 {
    let to_map = |rf: &[(u32, f64)]| -> std::collections::BTreeMap<u32, f64> {
        rf.iter().cloned().collect()
    };
    let p = to_map(&stats.forget.rank_freq);
    let q = to_map(&stats.retain.rank_freq);
    let keys: BTreeSet<u32> = p.keys().chain(q.keys()).cloned().collect();
    let mut jsd = 0.0;
    for k in keys {
        let (pv, qv) = (*p.get(&k).unwrap_or(&0.0), *q.get(&k).unwrap_or(&0.0));
        let m = 0.5 * (pv + qv);
        if pv > 0.0 {
            jsd += 0.5 * pv * (pv / m).log2();
        }
        if qv > 0.0 {
            jsd += 0.5 * qv * (qv / m).log2();
        }
    }
    jsd
}

// ── files ───────────────────────────────────────────────────────────────

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path)?;
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>, CorpusError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
                line: i + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_stream(path: &Path, stream: &[Request]) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path)?;
    for r in stream {
        writeln!(f, "{}", serde_json::to_string(&r.ids).expect("ids serialize"))?;
    }
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<Vec<Request>, CorpusError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<String> =
            serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(Request { ids });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(samples: &[Sample], cat: Category, split: Split) -> usize {
        samples
            .iter()
            .filter(|s| s.category == cat && s.split == split)
            .count()
    }

    #[test]
    fn answers_are_verbatim_substrings_everywhere() {
        let corpus = generate_corpus(3, 40, 0.5).unwrap();
        assert_eq!(corpus.len(), 120);
        for s in &corpus {
            assert!(
                s.text.contains(&s.answer),
                "answer not verbatim in {}",
                s.id
            );
            assert!(s.text.is_ascii() && s.question.is_ascii());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(9, 30, 0.5).unwrap();
        let b = generate_corpus(9, 30, 0.5).unwrap();
        let c = generate_corpus(10, 30, 0.5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn paper_scale_counts() {
        let corpus = generate_corpus(1, 200, 0.5).unwrap();
        assert_eq!(corpus.len(), 600);
        let forget = corpus.iter().filter(|s| s.split == Split::Forget).count();
        assert_eq!(forget, 300);
        for cat in CATEGORIES {
            let f = count(&corpus, cat, Split::Forget);
            assert!((f as i64 - 100).abs() <= 1, "{cat:?} split {f}");
        }
    }

    #[test]
    fn split_balance_within_one() {
        let corpus = generate_corpus(5, 21, 2.0 / 3.0).unwrap();
        for cat in CATEGORIES {
            let f = count(&corpus, cat, Split::Forget) as f64;
            assert!((f - 14.0).abs() <= 1.0, "{cat:?}: {f}");
        }
    }

    #[test]
    fn stress_pairs_flagged_partnered_and_forget() {
        let corpus = generate_corpus(2, 20, 0.5).unwrap();
        let by_id: std::collections::BTreeMap<_, _> =
            corpus.iter().map(|s| (s.id.clone(), s)).collect();
        let shared: Vec<_> = corpus
            .iter()
            .filter(|s| s.stress.starts_with("shared-name:"))
            .collect();
        assert_eq!(shared.len(), 2);
        assert_eq!(shared[0].question.is_empty(), false);
        assert_ne!(shared[0].question, shared[1].question); // job disambiguates
        assert_ne!(shared[0].answer, shared[1].answer);
        let dups: Vec<_> = corpus
            .iter()
            .filter(|s| s.stress.starts_with("duplicate:"))
            .collect();
        assert_eq!(dups.len(), 6); // one pair per category
        for s in corpus.iter().filter(|s| !s.stress.is_empty()) {
            assert_eq!(s.split, Split::Forget, "{}", s.id);
            let partner_id = s.stress.split(':').nth(1).unwrap();
            let partner = by_id.get(partner_id).expect("partner exists");
            if s.stress.starts_with("duplicate:") {
                assert_eq!(s.text, partner.text);
                assert_ne!(s.id, partner.id);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(
            generate_corpus(1, 1, 0.5),
            Err(CorpusError::TooFew(1))
        ));
        assert!(matches!(
            generate_corpus(1, 10, 0.0),
            Err(CorpusError::BadFraction(_))
        ));
        assert!(matches!(
            generate_corpus(1, 10, 1.0),
            Err(CorpusError::BadFraction(_))
        ));
    }

    #[test]
    fn request_stream_partitions_exactly() {
        let corpus = generate_corpus(4, 30, 0.5).unwrap();
        let forget: Vec<Sample> = corpus
            .iter()
            .filter(|s| s.split == Split::Forget)
            .cloned()
            .collect();
        let stream = make_request_stream(&forget, 1, 4).unwrap();
        assert_eq!(stream.len(), forget.len());
        let single = make_request_stream(&forget, forget.len(), 4).unwrap();
        assert_eq!(single.len(), 1);
        // disjointness + union oracle
        let mut seen = BTreeSet::new();
        for r in &stream {
            for id in &r.ids {
                assert!(seen.insert(id.clone()), "duplicate {id}");
            }
        }
        let want: BTreeSet<String> = forget.iter().map(|s| s.id.clone()).collect();
        assert_eq!(seen, want);
        // deterministic, and seed changes the order
        assert_eq!(stream, make_request_stream(&forget, 1, 4).unwrap());
        assert_ne!(stream, make_request_stream(&forget, 1, 5).unwrap());
    }

    #[test]
    fn chunks_tile_and_reconstruct() {
        let s = Sample {
            id: "t".into(),
            category: Category::Personal,
            split: Split::Forget,
            text: "abcdefghij".into(),
            question: "q".into(),
            answer: "abc".into(),
            stress: String::new(),
        };
        let cs = chunk(&s, 4).unwrap();
        assert_eq!(
            cs.iter().map(|c| c.text.len()).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        assert_eq!(cs[1].span, (4, 8));
        let whole = chunk(&s, 100).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].text, s.text);

        let corpus = generate_corpus(6, 30, 0.5).unwrap();
        for s in &corpus {
            let joined: String = chunk(s, DEFAULT_CHUNK_TOKENS)
                .unwrap()
                .iter()
                .map(|c| c.text.as_str())
                .collect();
            assert_eq!(joined, s.text);
        }
    }

    #[test]
    fn near_dup_family_shares_qa_but_not_text() {
        let fam = generate_near_dup_family(12, 8).unwrap();
        assert_eq!(fam.len(), 8);
        for m in &fam {
            assert_eq!(m.question, fam[0].question);
            assert_eq!(m.answer, fam[0].answer);
            assert_eq!(m.split, Split::Forget);
            assert!(m.stress.starts_with("near-dup:"));
            assert!(m.text.contains(&m.answer));
        }
        for i in 0..fam.len() {
            for j in (i + 1)..fam.len() {
                assert_ne!(fam[i].text, fam[j].text);
            }
        }
    }

    #[test]
    fn stats_oracle_and_split_similarity() {
        // hand oracle: "aab" → freq a=2/3, b=1/3
        let s = Sample {
            id: "t".into(),
            category: Category::Personal,
            split: Split::Forget,
            text: "aab".into(),
            question: String::new(),
            answer: String::new(),
            stress: String::new(),
        };
        let mut r = s.clone();
        r.split = Split::Retain;
        let st = corpus_stats(&[s.clone(), r]).unwrap();
        assert_eq!(st.forget.rank_freq[0], (b'a' as u32, 2.0 / 3.0));
        assert_eq!(st.forget.rank_freq[1], (b'b' as u32, 1.0 / 3.0));
        // identical splits → zero divergence
        assert!(token_jsd(&st) < 1e-12);

        // generated corpus: split distributions nearly overlap
        let corpus = generate_corpus(8, 40, 0.5).unwrap();
        let st = corpus_stats(&corpus).unwrap();
        let d = token_jsd(&st);
        assert!(d < 0.1, "token JSD {d}");
    }

    #[test]
    fn jsonl_and_stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(11, 12, 0.5).unwrap();
        let p = dir.path().join("corpus.jsonl");
        write_jsonl(&p, &corpus).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), corpus);

        let forget: Vec<Sample> = corpus
            .iter()
            .filter(|s| s.split == Split::Forget)
            .cloned()
            .collect();
        let stream = make_request_stream(&forget, 2, 11).unwrap();
        let sp = dir.path().join("stream.jsonl");
        write_stream(&sp, &stream).unwrap();
        assert_eq!(read_stream(&sp).unwrap(), stream);
    }

    #[test]
    fn ids_embed_seed() {
        let corpus = generate_corpus(77, 10, 0.5).unwrap();
        assert!(corpus.iter().all(|s| s.id.starts_with("s77-")));
    }
}
