//! Templated synthetic corpora for smoke runs and zero-shot sanity checks.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{Instance, LabelSet, Span, Triplet};
use crate::error::{Error, Result};

const HEAD_SLOT: &str = "{h}";
const TAIL_SLOT: &str = "{t}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub relation: String,
    /// Whitespace-separated words with exactly one `{h}` and one `{t}`.
    pub pattern: Vec<String>,
    pub heads: Vec<String>,
    pub tails: Vec<String>,
}

impl Template {
    pub fn new(relation: &str, pattern: &str, heads: &[&str], tails: &[&str]) -> Result<Self> {
        let pattern: Vec<String> = pattern.split_whitespace().map(String::from).collect();
        for slot in [HEAD_SLOT, TAIL_SLOT] {
            let n = pattern.iter().filter(|w| *w == slot).count();
            if n != 1 {
                return Err(Error::Generation(format!(
                    "template for {relation:?} has {n} {slot} slots, expected one"
                )));
            }
        }
        if heads.is_empty() || tails.is_empty() {
            return Err(Error::Generation(format!("template for {relation:?} has an empty vocabulary")));
        }
        Ok(Self {
            relation: relation.to_string(),
            pattern,
            heads: heads.iter().map(|s| s.to_string()).collect(),
            tails: tails.iter().map(|s| s.to_string()).collect(),
        })
    }
}

const PEOPLE: &[&str] = &[
    "Richard", "Alice", "Maria", "John", "Ahmed", "Yuki", "Olga", "Pedro", "Chen", "Fatima",
    "Lars", "Priya", "Tomas", "Amara", "Kenji", "Sofia", "Ivan", "Leila", "Noah", "Grace",
    "Omar", "Hannah", "Diego", "Mei", "Arjun", "Clara", "Felix", "Nadia", "Samuel", "Elena",
];
const COUNTRIES: &[&str] = &[
    "France", "Germany", "Japan", "Brazil", "Canada", "Kenya", "India", "Norway", "Chile",
    "Egypt", "the United States", "New Zealand", "South Korea", "Mexico", "Spain", "Peru",
];
const CITIES: &[&str] = &[
    "Paris", "Berlin", "Tokyo", "Lima", "Cairo", "Oslo", "Madrid", "Toronto", "Nairobi",
    "Mumbai", "New York", "Rio de Janeiro", "Seoul", "Santiago", "Vienna", "Dublin",
];
const ORGS: &[&str] = &[
    "Google", "Siemens", "Toyota", "Nokia", "Oxfam", "Reuters", "General Motors",
    "Deutsche Bank", "Airbus", "Philips", "Unilever", "Samsung",
];
const PARTIES: &[&str] = &[
    "Democratic", "Republican", "Labour", "Green", "Liberal", "Conservative", "Socialist", "Pirate",
];
const UNIVERSITIES: &[&str] = &[
    "Oxford", "Harvard", "Stanford", "Kyoto University", "Sorbonne University", "MIT", "Yale",
    "McGill University", "Cambridge", "Princeton",
];
const POSITIONS: &[&str] = &[
    "mayor", "senator", "governor", "prime minister", "ambassador", "foreign minister",
    "president", "chancellor",
];
const INSTRUMENTS: &[&str] = &["piano", "violin", "guitar", "cello", "drums", "flute", "trumpet", "harp"];
const LANGUAGES: &[&str] = &[
    "French", "German", "Japanese", "Portuguese", "Swahili", "Hindi", "Norwegian", "Arabic",
];
const SPORTS: &[&str] = &["football", "tennis", "chess", "rugby", "cricket", "golf", "hockey", "cycling"];

/// Sixteen relation templates. The first six are the usual training
/// relations; the next two rename the first two with paraphrased labels
/// over the same sentence patterns.
pub fn builtin_templates() -> Vec<Template> {
    let specs: [(&str, &str, &[&str], &[&str]); 16] = [
        ("country of citizenship", "{h} is a citizen of {t} .", PEOPLE, COUNTRIES),
        ("place of birth", "{h} was born in {t} .", PEOPLE, CITIES),
        ("employer", "{h} works for {t} .", PEOPLE, ORGS),
        ("member of political party", "{h} is a {t} politician .", PEOPLE, PARTIES),
        ("spouse", "{h} is married to {t} .", PEOPLE, PEOPLE),
        ("educated at", "{h} studied at {t} .", PEOPLE, UNIVERSITIES),
        ("citizen of country", "{h} is a citizen of {t} .", PEOPLE, COUNTRIES),
        ("birth place", "{h} was born in {t} .", PEOPLE, CITIES),
        ("position held", "{h} served as {t} .", PEOPLE, POSITIONS),
        ("headquarters location", "{h} has its headquarters in {t} .", ORGS, CITIES),
        ("instrument", "{h} plays the {t} .", PEOPLE, INSTRUMENTS),
        ("languages spoken", "{h} speaks {t} fluently .", PEOPLE, LANGUAGES),
        ("sport", "{h} competes in {t} .", PEOPLE, SPORTS),
        ("capital", "{t} is the capital of {h} .", COUNTRIES, CITIES),
        ("founded by", "{h} was founded by {t} .", ORGS, PEOPLE),
        ("place of death", "{h} died in {t} .", PEOPLE, CITIES),
    ];
    specs
        .iter()
        .map(|(r, p, h, t)| Template::new(r, p, h, t).expect("built-in template"))
        .collect()
}

pub fn seen_templates() -> Vec<Template> {
    builtin_templates().into_iter().take(6).collect()
}

/// Paraphrases of "country of citizenship" and "place of birth".
pub fn heldout_templates() -> Vec<Template> {
    builtin_templates().into_iter().skip(6).take(2).collect()
}

fn draw<R: Rng + ?Sized>(pool: &[String], used: &mut HashSet<String>, rng: &mut R, relation: &str) -> Result<String> {
    let free: Vec<&String> = pool.iter().filter(|e| !used.contains(*e)).collect();
    let pick = free
        .choose(rng)
        .ok_or_else(|| Error::Generation(format!("entity vocabulary for {relation:?} exhausted")))?;
    used.insert((*pick).clone());
    Ok((*pick).clone())
}

/// Appends one filled template (without its final period when `clause`)
/// and returns the spans of its head and tail.
fn fill<R: Rng + ?Sized>(
    t: &Template,
    words: &mut Vec<String>,
    used: &mut HashSet<String>,
    rng: &mut R,
    clause: bool,
) -> Result<(Span, Span)> {
    let head = draw(&t.heads, used, rng, &t.relation)?;
    let tail = draw(&t.tails, used, rng, &t.relation)?;
    let mut spans = [Span::new(0, 0); 2];
    let n = t.pattern.len();
    for (i, w) in t.pattern.iter().enumerate() {
        if clause && i + 1 == n && w == "." {
            continue;
        }
        let slot = match w.as_str() {
            HEAD_SLOT => Some((0, &head)),
            TAIL_SLOT => Some((1, &tail)),
            _ => None,
        };
        match slot {
            Some((k, entity)) => {
                let start = words.len();
                words.extend(entity.split_whitespace().map(String::from));
                spans[k] = Span::new(start, words.len() - 1);
            }
            None => words.push(w.clone()),
        }
    }
    Ok((spans[0], spans[1]))
}

/// Generates `count` sentences. Sentence `i` uses template `i mod T`; with
/// probability `multi_fraction` a second, different template is joined
/// with "and", giving two triplets. Entities never repeat within a
/// sentence.
pub fn generate<R: Rng + ?Sized>(
    templates: &[Template],
    count: usize,
    multi_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Instance>> {
    if count == 0 {
        return Err(Error::Generation("sentence count must be at least 1".into()));
    }
    if templates.len() < 2 {
        return Err(Error::Generation("at least two templates are needed".into()));
    }
    let mut labels = LabelSet::new();
    let ids: Vec<_> = templates
        .iter()
        .map(|t| labels.intern(&t.relation))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let first = i % templates.len();
        let mut chosen = vec![first];
        if rng.random::<f64>() < multi_fraction {
            let others: Vec<usize> = (0..templates.len()).filter(|&k| k != first).collect();
            chosen.push(*others.choose(rng).expect("two templates"));
        }
        let mut words = Vec::new();
        let mut used = HashSet::new();
        let mut triplets = Vec::new();
        for (n, &k) in chosen.iter().enumerate() {
            let clause = n + 1 < chosen.len();
            let (head, tail) = fill(&templates[k], &mut words, &mut used, rng, clause)?;
            if clause {
                words.push("and".into());
            }
            triplets.push(Triplet {
                head,
                tail,
                relation: ids[k].clone(),
            });
        }
        out.push(Instance {
            id: format!("synth-{i}"),
            words,
            triplets,
        });
    }
    Ok(out)
}
