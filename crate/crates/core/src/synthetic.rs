//! Deterministic Snips-like corpus generator.
//!
//! Utterances come from intent templates whose `{type}` placeholders are
//! filled with values drawn from per-type lexicons. Values are drawn with a
//! Zipf-like skew, so rare values end up out of vocabulary in val/test the
//! same way they do in crowd-sourced corpora. `object_name` is a broad
//! open-vocabulary slot.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, LabeledUtterance, Tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 300,
            test: 300,
            seed: 7,
        }
    }
}

const TEMPLATES: &[&str] = &[
    "play {song} by {artist}",
    "play some {genre} music",
    "play the album {album} by {artist}",
    "put on {playlist}",
    "add {song} to my {playlist} playlist",
    "i want to hear {artist} on {service}",
    "play {genre} from {year} on {service}",
    "what is the weather in {city} {timeRange}",
    "will it be {condition} in {city} {timeRange}",
    "is it {condition} in {country} right now",
    "forecast for {country} {timeRange}",
    "book a table for {party_size} at {restaurant} in {city}",
    "find a {cuisine} restaurant near {poi}",
    "reserve {restaurant} for {party_size} people {timeRange}",
    "i need a {cuisine} place in {city}",
    "find the movie {object_name}",
    "show me the book {object_name}",
    "rate {object_name} {rating_value} out of {best_rating}",
    "give {object_name} {rating_value} stars",
    "what movies are playing at {movie_theatre} {timeRange}",
    "show times for {movie_name} in {city}",
    "is {movie_name} playing at {movie_theatre}",
];

const FIXED: &[(&str, &[&str])] = &[
    (
        "condition",
        &[
            "sunny", "rainy", "snowy", "windy", "cold", "hot", "humid", "foggy",
        ],
    ),
    (
        "timeRange",
        &[
            "tomorrow",
            "tonight",
            "today",
            "next week",
            "this weekend",
            "at noon",
            "in the morning",
            "on friday",
            "at nine pm",
            "next month",
        ],
    ),
    (
        "party_size",
        &["two", "three", "four", "five", "six", "eight", "ten"],
    ),
    (
        "rating_value",
        &["one", "two", "three", "four", "five", "zero"],
    ),
    ("best_rating", &["five", "six", "ten"]),
    (
        "service",
        &["spotify", "deezer", "youtube", "pandora", "itunes"],
    ),
    (
        "year",
        &[
            "nineteen eighty",
            "the seventies",
            "the nineties",
            "two thousand",
            "the sixties",
        ],
    ),
];

/// Open-ended types: (name, lexicon words, distinct values, max value length).
const OPEN: &[(&str, usize, usize, usize)] = &[
    ("song", 120, 200, 3),
    ("artist", 100, 150, 2),
    ("genre", 25, 25, 1),
    ("album", 80, 120, 3),
    ("playlist", 60, 80, 3),
    ("city", 70, 90, 2),
    ("country", 40, 40, 1),
    ("restaurant", 70, 100, 2),
    ("cuisine", 20, 20, 1),
    ("poi", 50, 60, 2),
    ("object_name", 300, 500, 4),
    ("movie_theatre", 40, 50, 3),
    ("movie_name", 90, 120, 3),
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ve", "su", "ti", "no", "be", "da", "ru", "fe", "zo", "pa", "gi", "ho",
    "le", "mu", "si", "ta", "wen", "dor", "lin", "bar", "ko", "ne",
];

type Lexicon = BTreeMap<String, Vec<Vec<String>>>;

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(2..=3);
    (0..n)
        .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
        .collect()
}

fn build_lexicon(rng: &mut ChaCha8Rng) -> Lexicon {
    let mut lex = Lexicon::new();
    let mut used: HashSet<String> = TEMPLATES
        .iter()
        .flat_map(|t| t.split(' '))
        .filter(|w| !w.starts_with('{'))
        .map(str::to_string)
        .collect();
    for (name, values) in FIXED {
        used.extend(values.iter().flat_map(|v| v.split(' ')).map(str::to_string));
        lex.insert(
            name.to_string(),
            values
                .iter()
                .map(|v| v.split(' ').map(str::to_string).collect())
                .collect(),
        );
    }
    for &(name, n_words, n_values, max_len) in OPEN {
        let mut words = Vec::with_capacity(n_words);
        while words.len() < n_words {
            let w = pseudo_word(rng);
            if used.insert(w.clone()) {
                words.push(w);
            }
        }
        let mut seen = HashSet::new();
        let mut values = Vec::with_capacity(n_values);
        while values.len() < n_values {
            let len = rng.random_range(1..=max_len);
            let v: Vec<String> = (0..len)
                .map(|_| words[rng.random_range(0..words.len())].clone())
                .collect();
            if seen.insert(v.clone()) {
                values.push(v);
            }
        }
        lex.insert(name.to_string(), values);
    }
    lex
}

/// Index in `0..n` with probability roughly proportional to `1 / (i + 1)`.
fn zipf<R: Rng>(rng: &mut R, n: usize) -> usize {
    let u: f64 = rng.random();
    let i = ((n as f64 + 1.0).powf(u) - 1.0).floor() as usize;
    i.min(n - 1)
}

fn utterance(rng: &mut ChaCha8Rng, lex: &Lexicon) -> LabeledUtterance {
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for piece in template.split(' ') {
        match piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            Some(ty) => {
                let values = &lex[ty];
                let v = &values[zipf(rng, values.len())];
                for (i, w) in v.iter().enumerate() {
                    tokens.push(w.clone());
                    tags.push(if i == 0 {
                        Tag::Begin(ty.to_string())
                    } else {
                        Tag::Inside(ty.to_string())
                    });
                }
            }
            None => {
                tokens.push(piece.to_string());
                tags.push(Tag::Outside);
            }
        }
    }
    LabeledUtterance::new(tokens, tags).expect("templates produce aligned utterances")
}

/// Generates train/val/test splits from one seeded stream.
pub fn generate(cfg: &SyntheticConfig) -> CorpusSplits {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = build_lexicon(&mut rng);
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| utterance(&mut rng, &lex))
            .collect::<Vec<_>>()
    };
    let train = draw(cfg.train);
    let val = draw(cfg.val);
    let test = draw(cfg.test);
    CorpusSplits::new(train, val, test).expect("generated splits are valid")
}

/// Number of distinct slot types the generator can emit.
pub fn slot_type_count() -> usize {
    FIXED.len() + OPEN.len()
}
