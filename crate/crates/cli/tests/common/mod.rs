//! Offline pipeline fixture: originals, templates and canned answers whose
//! consistency and certainty carry signal about correctness.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CATEGORIES: [&str; 4] = ["capital", "genre", "occupation", "sport"];
const OFFSETS: [f64; 4] = [0.4, -0.3, 0.0, 0.6];
const VOCAB: [&[&str]; 4] = [
    &["paris", "lima", "cairo", "oslo", "quito", "hanoi", "dakar", "riga"],
    &["jazz", "opera", "punk", "blues", "techno", "reggae", "salsa", "grunge"],
    &[
        "painter", "actor", "singer", "lawyer", "poet", "chemist", "pilot", "farmer",
    ],
    &[
        "tennis", "rugby", "cricket", "hockey", "boxing", "rowing", "judo", "golf",
    ],
];
const TEMPLATES: [&[&str]; 4] = [
    &[
        "Which city is the capital of <subject>?",
        "<subject> has which capital?",
        "Name the capital city of <subject>.",
    ],
    &[
        "Which genre is <subject>?",
        "<subject> belongs to what genre?",
        "Name the genre of <subject>.",
    ],
    &[
        "What does <subject> do for a living?",
        "<subject> works as what?",
        "Name the occupation of <subject>.",
    ],
    &[
        "Which sport does <subject> play?",
        "<subject> competes in what sport?",
        "Name the sport of <subject>.",
    ],
];
pub const SAMPLES: usize = 10;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

pub struct Fixture {
    pub dir: PathBuf,
    pub config: PathBuf,
}

impl Fixture {
    pub fn output(&self) -> PathBuf {
        self.dir.join("out")
    }
}

/// Writes `n_per_category` originals for each of four categories with three
/// paraphrase templates each, canned greedy and sampled answers, and a
/// config that uses the offline embedder.
pub fn write_fixture(dir: &Path, n_per_category: usize, seed: u64) -> Fixture {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = String::new();
    let mut canned = String::new();
    for i in 0..n_per_category * CATEGORIES.len() {
        let k = i % CATEGORIES.len();
        let vocab = VOCAB[k];
        let id = format!("q{i:04}");
        let subject = format!("Subject {i}");
        let gold = vocab[rng.random_range(0..vocab.len())];
        let log_pop = 7.0 + 1.5 * normal(&mut rng);
        let s_pop = log_pop.exp().round().max(1.0) as u64;
        let skill = normal(&mut rng);
        let correct = rng.random::<f64>() < sigmoid(OFFSETS[k] + 1.0 * skill + 0.4 * (log_pop - 7.0) / 1.5);
        let wrong = |rng: &mut ChaCha8Rng| loop {
            let w = vocab[rng.random_range(0..vocab.len())];
            if w != gold {
                break w;
            }
        };
        let answer = if correct { gold } else { wrong(&mut rng) };
        let shift = if correct { 0.4 } else { -0.4 };
        let agree = sigmoid(0.3 + 0.5 * skill + shift + 0.8 * normal(&mut rng));
        let pick = |rng: &mut ChaCha8Rng, p: f64| {
            if rng.random::<f64>() < p {
                answer
            } else {
                vocab[rng.random_range(0..vocab.len())]
            }
        };

        writeln!(
            dataset,
            r#"{{"id":"{id}","category":"{}","subject":"{subject}","question":"What is the {} of {subject}?","gold_answers":["{gold}"],"s_pop":{s_pop}}}"#,
            CATEGORIES[k], CATEGORIES[k]
        )
        .unwrap();
        let samples: Vec<String> = (0..SAMPLES).map(|_| format!("\"{}\"", pick(&mut rng, agree))).collect();
        writeln!(
            canned,
            r#"{{"question_id":"{id}","greedy":"{}. More text follows.","samples":[{}]}}"#,
            capitalize(answer),
            samples.join(",")
        )
        .unwrap();
        for j in 0..TEMPLATES[k].len() {
            writeln!(
                canned,
                r#"{{"question_id":"{id}#{j}","greedy":"{}"}}"#,
                pick(&mut rng, agree)
            )
            .unwrap();
        }
    }
    let templates = format!(
        "{{{}}}",
        CATEGORIES
            .iter()
            .zip(TEMPLATES)
            .map(|(c, t)| format!(
                "\"{c}\":[{}]",
                t.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(",")
            ))
            .collect::<Vec<_>>()
            .join(",")
    );
    fs::write(dir.join("dataset.jsonl"), dataset).unwrap();
    fs::write(dir.join("templates.json"), templates).unwrap();
    fs::write(dir.join("canned.jsonl"), canned).unwrap();
    let config = dir.join("qappp.toml");
    fs::write(
        &config,
        r#"dataset = "dataset.jsonl"
templates = "templates.json"
output_dir = "out"
seed = 7

[embedding]
provider = "hashing"

[[models]]
model_id = "stub-model"
api_style = "canned"
canned_path = "canned.jsonl"
"#,
    )
    .unwrap();
    Fixture {
        dir: dir.to_path_buf(),
        config,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}
