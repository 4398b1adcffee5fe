//! Seeded generator for a flight-booking slot corpus whose categories match
//! the default flight question bank.
//!
//! Every slot value is introduced by a cue phrase. Cue phrases follow a
//! Zipf-like frequency curve, so a small labeled sample sees only the common
//! ones. Several cues are shared between categories and are told apart only
//! by the kind of value they introduce ("leaving boston" and "leaving at
//! 9 am").

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Category, SlotAnnotation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub sentences: usize,
    pub seed: u64,
    /// Exponent of the cue-phrase frequency curve; larger means a heavier
    /// head and rarer tail.
    pub cue_exponent: f64,
    /// Exponent of the city and airline frequency curves.
    pub value_exponent: f64,
    /// Probability that a sentence lists its slots in the usual order
    /// (origin, destination, stop, airline, times); otherwise the order is
    /// shuffled.
    #[serde(default = "default_canonical_order")]
    pub canonical_order: f64,
}

fn default_canonical_order() -> f64 {
    0.8
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sentences: 3000,
            seed: 17,
            cue_exponent: 1.1,
            value_exponent: 0.8,
            canonical_order: default_canonical_order(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ValueKind {
    City,
    Time,
    Airline,
}

struct CategorySpec {
    name: &'static str,
    kind: ValueKind,
    weight: f64,
    cues: &'static [&'static str],
}

// `{}` marks where the value goes.
const CATEGORIES: &[CategorySpec] = &[
    CategorySpec {
        name: "airline",
        kind: ValueKind::Airline,
        weight: 0.10,
        cues: &[
            "on {}",
            "with {}",
            "flying {}",
            "on a {} flight",
            "operated by {}",
            "using {}",
            "by {}",
            "aboard {}",
            "on {} airlines",
            "booked on {}",
            "served by {}",
            "that {} runs",
        ],
    },
    CategorySpec {
        name: "arrive_time",
        kind: ValueKind::Time,
        weight: 0.11,
        cues: &[
            "arriving {}",
            "arriving at {}",
            "that arrives {}",
            "getting in {}",
            "arriving by {}",
            "landing {}",
            "that lands {}",
            "with arrival {}",
            "getting there {}",
            "reaching it {}",
            "touching down {}",
            "due in {}",
        ],
    },
    CategorySpec {
        name: "depart_time",
        kind: ValueKind::Time,
        weight: 0.16,
        cues: &[
            "leaving {}",
            "departing {}",
            "leaving at {}",
            "that leaves {}",
            "departing at {}",
            "taking off {}",
            "with departure {}",
            "that departs {}",
            "setting off {}",
            "going out {}",
            "wheels up {}",
            "heading out {}",
        ],
    },
    CategorySpec {
        name: "return_time",
        kind: ValueKind::Time,
        weight: 0.08,
        cues: &[
            "returning {}",
            "coming back {}",
            "returning on {}",
            "with a return {}",
            "back {}",
            "flying back {}",
            "and return {}",
            "that returns {}",
            "getting back {}",
            "home again {}",
            "heading home {}",
            "on the way back {}",
        ],
    },
    CategorySpec {
        name: "fromloc",
        kind: ValueKind::City,
        weight: 0.24,
        cues: &[
            "from {}",
            "leaving {}",
            "departing {}",
            "out of {}",
            "leaving from {}",
            "originating in {}",
            "starting in {}",
            "flying out of {}",
            "beginning in {}",
            "that starts at {}",
            "coming out of {}",
            "taking off from {}",
        ],
    },
    CategorySpec {
        name: "toloc",
        kind: ValueKind::City,
        weight: 0.23,
        cues: &[
            "to {}",
            "going to {}",
            "into {}",
            "arriving in {}",
            "bound for {}",
            "heading to {}",
            "destined for {}",
            "landing in {}",
            "ending in {}",
            "that reaches {}",
            "flying into {}",
            "terminating in {}",
        ],
    },
    CategorySpec {
        name: "stoploc",
        kind: ValueKind::City,
        weight: 0.08,
        cues: &[
            "via {}",
            "stopping in {}",
            "with a stop in {}",
            "connecting in {}",
            "through {}",
            "with a layover in {}",
            "making a stop in {}",
            "stopping over in {}",
            "changing planes in {}",
            "passing through {}",
            "touching down in {}",
            "with a connection in {}",
        ],
    },
];

const CANONICAL: &[&str] = &[
    "fromloc",
    "toloc",
    "stoploc",
    "airline",
    "depart_time",
    "arrive_time",
    "return_time",
];

const PREFIXES: &[&str] = &[
    "show me flights",
    "i want a flight",
    "what flights are there",
    "list flights",
    "i need a flight",
    "find me a flight",
    "are there any flights",
    "give me the flights",
    "i would like to fly",
    "please list all flights",
    "which flights go",
    "can you book a flight",
    "what are the options",
    "i am looking for a flight",
];

const SUFFIXES: &[&str] = &[
    "please",
    "for two people",
    "in economy",
    "with the lowest fare",
    "if possible",
];

const CITIES: &[&str] = &[
    "boston",
    "denver",
    "atlanta",
    "dallas",
    "pittsburgh",
    "baltimore",
    "philadelphia",
    "san francisco",
    "washington",
    "oakland",
    "chicago",
    "new york",
    "seattle",
    "miami",
    "houston",
    "phoenix",
    "detroit",
    "cleveland",
    "charlotte",
    "memphis",
    "nashville",
    "orlando",
    "tampa",
    "milwaukee",
    "minneapolis",
    "los angeles",
    "las vegas",
    "salt lake city",
    "san diego",
    "san jose",
    "st. louis",
    "kansas city",
    "indianapolis",
    "columbus",
    "cincinnati",
    "montreal",
    "toronto",
    "newark",
    "burbank",
    "ontario",
    "long beach",
    "tacoma",
    "portland",
    "sacramento",
    "albuquerque",
    "tucson",
    "el paso",
    "austin",
    "san antonio",
    "new orleans",
    "jacksonville",
    "raleigh",
    "richmond",
    "buffalo",
    "hartford",
    "providence",
    "omaha",
    "des moines",
    "anchorage",
    "honolulu",
    "fort worth",
    "westchester county",
];

const AIRLINES: &[&str] = &[
    "delta",
    "united",
    "american",
    "continental",
    "us air",
    "northwest",
    "twa",
    "alaska airlines",
    "america west",
    "lufthansa",
    "midwest express",
    "southwest",
    "air canada",
    "nationair",
    "tower air",
    "sun country",
    "frontier",
    "jetblue",
    "hawaiian",
    "spirit",
];

const DAYS: &[&str] = &[
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "tomorrow",
    "today",
];
const PARTS: &[&str] = &["morning", "afternoon", "evening", "night"];
const CLOCKS: &[&str] = &[
    "7 am", "8 am", "9 am", "10 am", "11 am", "noon", "1 pm", "2 pm", "3 pm", "4 pm", "5 pm", "6 pm", "7 pm", "8 pm",
    "9 pm", "10 pm", "midnight", "6 30 am", "8 30 pm",
];

fn zipf(n: usize, exponent: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / (r as f64).powf(exponent))).expect("non-empty weights")
}

fn time_phrase<R: Rng>(rng: &mut R) -> String {
    let day = DAYS.choose(rng).unwrap();
    let part = PARTS.choose(rng).unwrap();
    let clock = CLOCKS.choose(rng).unwrap();
    match rng.gen_range(0..5) {
        0 => clock.to_string(),
        1 => format!("{day} {part}"),
        2 => day.to_string(),
        3 => format!("{clock} {day}"),
        _ => part.to_string(),
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Generates `cfg.sentences` annotated sentences; identical configs give
/// identical corpora. Each sentence holds one to four slots of distinct
/// categories.
pub fn generate(cfg: &SynthConfig) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cue_dists: Vec<WeightedIndex<f64>> = CATEGORIES
        .iter()
        .map(|c| zipf(c.cues.len(), cfg.cue_exponent))
        .collect();
    let city_dist = zipf(CITIES.len(), cfg.value_exponent);
    let airline_dist = zipf(AIRLINES.len(), cfg.value_exponent);
    let slot_count = WeightedIndex::new([0.25, 0.35, 0.25, 0.15]).unwrap();
    let prefix_dist = zipf(PREFIXES.len(), 1.0);

    (0..cfg.sentences)
        .map(|i| {
            let n_slots = slot_count.sample(&mut rng) + 1;
            let mut pool: Vec<usize> = (0..CATEGORIES.len()).collect();
            let mut chosen = Vec::with_capacity(n_slots);
            for _ in 0..n_slots {
                let w: Vec<f64> = pool.iter().map(|&c| CATEGORIES[c].weight).collect();
                let pick = WeightedIndex::new(&w).unwrap().sample(&mut rng);
                chosen.push(pool.remove(pick));
            }
            if rng.gen_bool(cfg.canonical_order) {
                chosen.sort_by_key(|&c| CANONICAL.iter().position(|&n| n == CATEGORIES[c].name));
            } else {
                chosen.shuffle(&mut rng);
            }

            let mut tokens = words(PREFIXES[prefix_dist.sample(&mut rng)]);
            let mut slots = Vec::with_capacity(n_slots);
            let mut used_cities: Vec<&str> = Vec::new();
            for &c in &chosen {
                let spec = &CATEGORIES[c];
                let cue = spec.cues[cue_dists[c].sample(&mut rng)];
                let value = match spec.kind {
                    ValueKind::City => loop {
                        let city = CITIES[city_dist.sample(&mut rng)];
                        if !used_cities.contains(&city) {
                            used_cities.push(city);
                            break city.to_string();
                        }
                    },
                    ValueKind::Airline => AIRLINES[airline_dist.sample(&mut rng)].to_string(),
                    ValueKind::Time => time_phrase(&mut rng),
                };
                let (before, after) = cue.split_once("{}").expect("cue has a value slot");
                tokens.extend(words(before));
                let start = tokens.len();
                tokens.extend(words(&value));
                let end = tokens.len();
                tokens.extend(words(after));
                slots.push(SlotAnnotation {
                    category: Category::from(spec.name),
                    start,
                    end,
                });
            }
            if rng.gen_bool(0.2) {
                tokens.extend(words(SUFFIXES.choose(&mut rng).unwrap()));
            }
            AnnotatedSentence {
                id: format!("synth-{i:05}"),
                tokens,
                slots,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QuestionBank;

    #[test]
    fn deterministic_valid_and_matches_bank() {
        let cfg = SynthConfig {
            sentences: 300,
            ..SynthConfig::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        let bank = QuestionBank::atis_default();
        let mut seen = std::collections::HashSet::new();
        for s in &a {
            s.validate().unwrap();
            assert!((1..=4).contains(&s.slots.len()));
            for c in s.categories() {
                assert!(bank.contains(c));
                seen.insert(c.clone());
            }
        }
        assert_eq!(seen.len(), bank.num_categories());
        let other = generate(&SynthConfig { seed: 18, ..cfg });
        assert_ne!(a, other);
    }

    #[test]
    fn canonical_order_is_followed_when_forced() {
        let rank = |s: &AnnotatedSentence| -> Vec<usize> {
            s.slots
                .iter()
                .map(|sl| CANONICAL.iter().position(|&n| n == sl.category.as_str()).unwrap())
                .collect()
        };
        let ordered = generate(&SynthConfig {
            sentences: 200,
            canonical_order: 1.0,
            ..SynthConfig::default()
        });
        assert!(ordered.iter().all(|s| rank(s).windows(2).all(|w| w[0] < w[1])));
        let shuffled = generate(&SynthConfig {
            sentences: 200,
            canonical_order: 0.0,
            ..SynthConfig::default()
        });
        assert!(shuffled.iter().any(|s| rank(s).windows(2).any(|w| w[0] > w[1])));
    }
}
