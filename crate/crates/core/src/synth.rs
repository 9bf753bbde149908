//! Synthetic corpus with tag-dependent path correctness.
//!
//! Each dataset tag has a fixed mixture of correctness patterns
//! `(text, image, fusion)`. Paired with simulated encoders that add a
//! per-tag bias to every embedding, the best path is recoverable from the
//! features, so a gate can learn it. The mixtures also put some weight on
//! cheaper paths that tie with fusion, which is where the resource penalty
//! changes the policy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RawRecord, SimOutcome};
use crate::hashing::{derive_seed, hash64};
use crate::table::Table;
use crate::types::DatasetTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Records per trainable tag.
    pub per_dataset: usize,
    /// Records per evaluation-only tag (FeTaQA, HiTab).
    pub per_eval_only: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_dataset: 500,
            per_eval_only: 0,
            seed: 0,
        }
    }
}

macro_rules! p {
    ($t:expr, $i:expr, $f:expr) => {
        SimOutcome {
            text: $t,
            image: $i,
            fusion: $f,
        }
    };
}

/// `(weight, pattern)` pairs for a tag; weights sum to 1.
pub fn pattern_mixture(tag: DatasetTag) -> &'static [(f64, SimOutcome)] {
    match tag {
        DatasetTag::TabFact => &[(0.97, p!(true, false, true)), (0.03, p!(false, false, true))],
        DatasetTag::InfoTabs => &[(0.97, p!(false, true, true)), (0.03, p!(false, false, true))],
        DatasetTag::TabMwp => &[(0.9, p!(true, true, true)), (0.1, p!(true, false, true))],
        DatasetTag::Wtq => &[
            (0.65, p!(false, false, true)),
            (0.3, p!(true, true, true)),
            (0.05, p!(false, false, false)),
        ],
        DatasetTag::TatQa => &[(0.8, p!(false, true, false)), (0.2, p!(true, true, false))],
        DatasetTag::HiTab => &[(0.7, p!(false, false, true)), (0.3, p!(false, true, true))],
        DatasetTag::FeTaQa => &[(0.6, p!(true, true, true)), (0.4, p!(true, false, false))],
    }
}

fn draw(rng: &mut ChaCha8Rng, mixture: &[(f64, SimOutcome)]) -> SimOutcome {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(w, pattern) in mixture {
        acc += w;
        if u < acc {
            return pattern;
        }
    }
    mixture[mixture.len() - 1].1
}

const ITEMS: [&str; 8] = ["apples", "bolts", "cables", "drills", "easels", "fans", "gloves", "hinges"];
const REGIONS: [&str; 5] = ["north", "south", "east", "west", "central"];

fn make_table(rng: &mut ChaCha8Rng) -> Table {
    let n_rows = rng.gen_range(3..=6);
    let rows = (0..n_rows)
        .map(|_| {
            vec![
                ITEMS[rng.gen_range(0..ITEMS.len())].to_string(),
                REGIONS[rng.gen_range(0..REGIONS.len())].to_string(),
                rng.gen_range(1..1000).to_string(),
                rng.gen_range(1990..2024).to_string(),
            ]
        })
        .collect();
    Table::new(vec!["item".into(), "region".into(), "units".into(), "year".into()], rows)
}

fn make_question(tag: DatasetTag, table: &Table, rng: &mut ChaCha8Rng) -> (String, String) {
    let row = &table.rows[rng.gen_range(0..table.rows.len())];
    let (item, region, units, year) = (&row[0], &row[1], &row[2], &row[3]);
    match tag {
        DatasetTag::TabFact => {
            let truth = rng.gen_bool(0.5);
            let claimed = if truth { units.clone() } else { format!("{}", units.parse::<u32>().unwrap() + 1) };
            (
                format!("Statement: {item} in the {region} region sold {claimed} units in {year}."),
                if truth { "True" } else { "False" }.into(),
            )
        }
        DatasetTag::InfoTabs => {
            let label = ["Entail", "Contradict", "Neutral"][rng.gen_range(0..3)];
            (format!("Hypothesis: the {region} region reported {item} in {year}."), label.into())
        }
        DatasetTag::TabMwp => {
            let total: u32 = table.rows.iter().map(|r| r[2].parse::<u32>().unwrap()).sum();
            ("How many units were sold in total?".into(), total.to_string())
        }
        DatasetTag::FeTaQa => (
            format!("What happened with {item} in {year}?"),
            format!("In {year}, {item} sold {units} units in the {region} region."),
        ),
        DatasetTag::Wtq | DatasetTag::HiTab | DatasetTag::TatQa => {
            (format!("How many units of {item} were sold in the {region} region in {year}?"), units.clone())
        }
    }
}

/// Generates raw records, ordered by tag then index. Deterministic in
/// `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Vec<RawRecord> {
    let mut out = Vec::new();
    for tag in DatasetTag::ALL {
        let n = if tag.is_trainable() { cfg.per_dataset } else { cfg.per_eval_only };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, hash64(tag.as_str().as_bytes())));
        for i in 0..n {
            let table = make_table(&mut rng);
            let (question, gold) = make_question(tag, &table, &mut rng);
            let sim = draw(&mut rng, pattern_mixture(tag));
            out.push(RawRecord {
                id: format!("{}-{i:05}", tag.as_str()),
                dataset: tag,
                question,
                table,
                gold_answer: Some(gold),
                sim: Some(sim),
            });
        }
    }
    out
}
