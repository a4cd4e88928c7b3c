use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, ProductRecord, QaText};
use crate::error::{Error, Result};

const BRANDS: &[&str] = &[
    "alobon", "vexel", "corin", "maylux", "tandor", "brisque", "noven", "quilla", "zephor",
    "ludmark",
];

const CATEGORIES: &[&str] = &[
    "lipstick", "jacket", "kettle", "backpack", "blanket", "speaker", "lantern", "sandals",
];

/// Selling-point adjectives; reasons are built from these. Kept disjoint
/// from every filler pool so "appears only in QA" can be guaranteed by
/// construction.
pub const DEFAULT_ASPECTS: &[&str] = &[
    "washable", "moisturizing", "durable", "lightweight", "waterproof", "breathable",
    "foldable", "rechargeable", "adjustable", "portable", "stretchy", "antislip",
    "fragrant", "spacious", "silent", "sturdy", "softtouch", "quickdry", "ecofriendly",
    "scratchproof", "longlasting", "compact", "cozy", "vivid",
];

// The reason templates only use the category, the planted aspects, and
// the connectors {premium, with, and, quality, design, truly}. Every
// title plants all the connectors, so a zero QA-only fraction makes each
// reason token derivable from the title and attributes.

const TITLE_FILLERS: &[&str] = &[
    "series", "edition", "classic", "model", "style", "line", "collection", "comfort",
    "daily", "home", "travel", "outdoor", "indoor", "family", "modern", "basic", "pro",
    "plus", "new", "season", "gift", "pack", "size", "large", "small", "color", "black",
    "white",
];

const ATTR_WORDS: &[&str] = &[
    "cotton", "steel", "rubber", "ceramic", "nylon", "bamboo", "leather", "mesh", "velvet",
    "matte", "glossy", "round", "square", "slim", "thick", "double", "single", "layered",
    "zippered", "corded",
];

const QA_FILLERS: &[&str] = &[
    "really", "actually", "overall", "honestly", "maybe", "definitely", "probably",
    "mostly", "pretty", "fairly", "somewhat", "indeed", "surely", "perhaps", "basically",
    "generally", "certainly", "roughly", "ultimately", "frankly",
];

/// Recipe for a deterministic synthetic corpus whose shape statistics
/// track the documented length and Q&A-count targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub products: usize,
    pub aspect_pool: Vec<String>,
    pub aspects_per_product: usize,
    /// Fraction of each product's planted aspects that appear only in
    /// Q&A text, never in the title or attributes.
    pub qa_only_fraction: f64,
    pub title_len: f64,
    pub question_len: f64,
    pub answer_len: f64,
    pub attributes_len: f64,
    pub qa_pairs_mean: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            products: 1000,
            aspect_pool: DEFAULT_ASPECTS.iter().map(|s| s.to_string()).collect(),
            aspects_per_product: 4,
            qa_only_fraction: 0.5,
            title_len: 23.2,
            question_len: 18.05,
            answer_len: 18.59,
            attributes_len: 16.03,
            qa_pairs_mean: 30.9,
            seed: 42,
        }
    }
}

impl SyntheticCorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.aspect_pool.is_empty() {
            return Err(Error::Config("aspect pool must be non-empty".into()));
        }
        if self.aspects_per_product == 0 || self.aspects_per_product > self.aspect_pool.len() {
            return Err(Error::Config(format!(
                "aspects_per_product {} outside 1..={}",
                self.aspects_per_product,
                self.aspect_pool.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.qa_only_fraction) {
            return Err(Error::Config("qa_only_fraction must be in [0,1]".into()));
        }
        if self.qa_only_fraction > 0.0 && self.qa_pairs_mean < 1.0 {
            return Err(Error::Config(
                "qa_only_fraction > 0 needs qa_pairs_mean >= 1 so the aspects can appear somewhere"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Aspects per product that only Q&A text may express.
    pub fn qa_only_count(&self) -> usize {
        (self.qa_only_fraction * self.aspects_per_product as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

fn jittered(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    (mean * rng.gen_range(0.85..1.15)).round() as usize
}

fn pad_with<'a>(
    words: &mut Vec<&'a str>,
    target: usize,
    pool: &[&'a str],
    rng: &mut ChaCha8Rng,
) {
    while words.len() < target {
        words.push(pool[rng.gen_range(0..pool.len())]);
    }
}

/// Deterministically generate `spec.products` records.
///
/// Each product plants `aspects_per_product` aspects; the reason
/// verbalizes their union, the title and attributes express only the
/// non-QA-only ones, and each QA-only aspect is guaranteed at least one
/// Q&A pair mentioning it.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<ProductRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_qa_only = spec.qa_only_count();
    let mut records = Vec::with_capacity(spec.products);

    for idx in 0..spec.products {
        let brand = BRANDS[rng.gen_range(0..BRANDS.len())];
        let category = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];

        // planted aspects, kept in pool order so reasons are predictable
        let mut pool_indices: Vec<usize> = (0..spec.aspect_pool.len()).collect();
        pool_indices.shuffle(&mut rng);
        let mut planted: Vec<usize> = pool_indices[..spec.aspects_per_product].to_vec();
        planted.sort_unstable();
        let aspects: Vec<&str> = planted.iter().map(|&i| spec.aspect_pool[i].as_str()).collect();

        let mut choice: Vec<usize> = (0..aspects.len()).collect();
        choice.shuffle(&mut rng);
        let qa_only: Vec<&str> = choice[..n_qa_only].iter().map(|&i| aspects[i]).collect();
        let item_aspects: Vec<&str> = aspects
            .iter()
            .filter(|a| !qa_only.contains(a))
            .copied()
            .collect();

        // title: brand + every reason connector + item aspects + fillers
        let mut title: Vec<&str> = vec![brand, "premium", category, "with"];
        title.extend(&item_aspects);
        title.extend(["truly", "and", "quality", "design"]);
        let target = jittered(&mut rng, spec.title_len).max(title.len());
        pad_with(&mut title, target, TITLE_FILLERS, &mut rng);

        // attributes: item aspects + material words
        let mut attrs: Vec<&str> = item_aspects.clone();
        let target = jittered(&mut rng, spec.attributes_len).max(attrs.len());
        pad_with(&mut attrs, target, ATTR_WORDS, &mut rng);

        // reason: one of three fixed templates over the full aspect set
        let list = join_with_and(&aspects);
        let reason = match rng.gen_range(0..3u8) {
            0 => format!("premium {category} with {list}"),
            1 => format!("quality {category} design with {list}"),
            _ => format!("truly premium {category} with {list} quality"),
        };

        // QA pairs: one per QA-only aspect is guaranteed, the rest split
        // between aspect confirmations and shipping distractors
        let n_pairs = if spec.qa_pairs_mean > 0.0 {
            jittered(&mut rng, spec.qa_pairs_mean).max(n_qa_only).max(1)
        } else {
            0
        };
        let mut qa_pairs = Vec::with_capacity(n_pairs);
        for j in 0..n_pairs {
            let pair = if j < qa_only.len() {
                aspect_pair(&mut rng, spec, category, qa_only[j])
            } else if rng.gen_bool(0.5) {
                let aspect = aspects[rng.gen_range(0..aspects.len())];
                aspect_pair(&mut rng, spec, category, aspect)
            } else {
                distractor_pair(&mut rng, spec)
            };
            qa_pairs.push(pair);
        }

        records.push(ProductRecord {
            v: 1,
            id: format!("p{idx:06}"),
            title: title.join(" "),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            qa_pairs,
            reason: Some(reason),
        });
    }
    Ok(records)
}

fn join_with_and(aspects: &[&str]) -> String {
    let mut out = String::new();
    for (i, a) in aspects.iter().enumerate() {
        if i > 0 {
            out.push_str(" and ");
        }
        out.push_str(a);
    }
    out
}

fn aspect_pair(rng: &mut ChaCha8Rng, spec: &SyntheticCorpusSpec, category: &str, aspect: &str) -> QaText {
    let mut q: Vec<&str> = vec![
        "does", "this", category, "really", "have", aspect, "tell", "me", "more", "before",
        "i", "buy",
    ];
    let target = jittered(rng, spec.question_len).max(q.len());
    pad_with(&mut q, target, QA_FILLERS, rng);

    let mut a: Vec<&str> = vec![
        "yes", "it", "is", aspect, "indeed", "and", "i", "am", "very", "happy", "with",
        "this", category,
    ];
    let target = jittered(rng, spec.answer_len).max(a.len());
    pad_with(&mut a, target, QA_FILLERS, rng);

    QaText {
        q: q.join(" "),
        a: a.join(" "),
    }
}

fn distractor_pair(rng: &mut ChaCha8Rng, spec: &SyntheticCorpusSpec) -> QaText {
    let mut q: Vec<&str> = vec![
        "when", "will", "my", "order", "arrive", "i", "placed", "it", "days", "ago", "still",
        "waiting",
    ];
    let target = jittered(rng, spec.question_len).max(q.len());
    pad_with(&mut q, target, QA_FILLERS, rng);

    let mut a: Vec<&str> = vec![
        "the", "delivery", "takes", "about", "three", "days", "depending", "on", "region",
        "please", "be", "patient",
    ];
    let target = jittered(rng, spec.answer_len).max(a.len());
    pad_with(&mut a, target, QA_FILLERS, rng);

    QaText {
        q: q.join(" "),
        a: a.join(" "),
    }
}

/// Token-level shape statistics of a corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub products: usize,
    pub title_mean: f64,
    pub question_mean: f64,
    pub answer_mean: f64,
    pub attributes_mean: f64,
    pub reason_mean: f64,
    pub qa_pairs_mean: f64,
}

pub fn corpus_stats(records: &[ProductRecord]) -> CorpusStats {
    let n = records.len().max(1) as f64;
    let mut title = 0.0;
    let mut attrs = 0.0;
    let mut reason = 0.0;
    let mut reasons = 0.0;
    let mut q_tokens = 0.0;
    let mut a_tokens = 0.0;
    let mut pairs = 0.0;
    for r in records {
        title += tokenize(&r.title).len() as f64;
        attrs += tokenize(&r.attributes.join(" ")).len() as f64;
        if let Some(re) = &r.reason {
            reason += tokenize(re).len() as f64;
            reasons += 1.0;
        }
        for p in &r.qa_pairs {
            q_tokens += tokenize(&p.q).len() as f64;
            a_tokens += tokenize(&p.a).len() as f64;
        }
        pairs += r.qa_pairs.len() as f64;
    }
    CorpusStats {
        products: records.len(),
        title_mean: title / n,
        question_mean: if pairs > 0.0 { q_tokens / pairs } else { 0.0 },
        answer_mean: if pairs > 0.0 { a_tokens / pairs } else { 0.0 },
        attributes_mean: attrs / n,
        reason_mean: if reasons > 0.0 { reason / reasons } else { 0.0 },
        qa_pairs_mean: pairs / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_is_identical() {
        let spec = SyntheticCorpusSpec {
            products: 20,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_track_targets_within_15_percent() {
        let spec = SyntheticCorpusSpec::default();
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let stats = corpus_stats(&corpus);
        let close = |got: f64, want: f64| (got - want).abs() <= 0.15 * want;
        assert!(close(stats.title_mean, spec.title_len), "title {}", stats.title_mean);
        assert!(close(stats.question_mean, spec.question_len), "q {}", stats.question_mean);
        assert!(close(stats.answer_mean, spec.answer_len), "a {}", stats.answer_mean);
        assert!(close(stats.attributes_mean, spec.attributes_len), "attr {}", stats.attributes_mean);
        assert!(close(stats.reason_mean, 10.5), "reason {}", stats.reason_mean);
        assert!(close(stats.qa_pairs_mean, spec.qa_pairs_mean), "pairs {}", stats.qa_pairs_mean);
    }

    #[test]
    fn zero_qa_only_fraction_makes_reasons_derivable() {
        let spec = SyntheticCorpusSpec {
            products: 50,
            qa_only_fraction: 0.0,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        for r in &corpus {
            let mut item: HashSet<String> = tokenize(&r.title).into_iter().collect();
            item.extend(tokenize(&r.attributes.join(" ")));
            for tok in tokenize(r.reason.as_ref().unwrap()) {
                assert!(item.contains(&tok), "reason token {tok} not in item text");
            }
        }
    }

    #[test]
    fn qa_only_aspects_never_leak_into_item_text() {
        let spec = SyntheticCorpusSpec {
            products: 50,
            qa_only_fraction: 0.5,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let need = spec.qa_only_count();
        assert!(need > 0);
        for r in &corpus {
            let mut item: HashSet<String> = tokenize(&r.title).into_iter().collect();
            item.extend(tokenize(&r.attributes.join(" ")));
            let qa_text: HashSet<String> = r
                .qa_pairs
                .iter()
                .flat_map(|p| {
                    let mut t = tokenize(&p.q);
                    t.extend(tokenize(&p.a));
                    t
                })
                .collect();
            let reason_aspects: Vec<String> = tokenize(r.reason.as_ref().unwrap())
                .into_iter()
                .filter(|t| spec.aspect_pool.iter().any(|a| a == t))
                .collect();
            let qa_exclusive = reason_aspects
                .iter()
                .filter(|t| !item.contains(*t))
                .count();
            assert!(qa_exclusive >= need, "only {qa_exclusive} QA-only aspects");
            for t in reason_aspects.iter().filter(|t| !item.contains(*t)) {
                assert!(qa_text.contains(t), "QA-only aspect {t} missing from QA text");
            }
        }
    }

    #[test]
    fn qa_mean_zero_yields_long_tail_corpus() {
        let spec = SyntheticCorpusSpec {
            products: 10,
            qa_only_fraction: 0.0,
            qa_pairs_mean: 0.0,
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        assert!(corpus.iter().all(|r| r.qa_pairs.is_empty()));
    }

    #[test]
    fn invalid_spec_combinations_rejected() {
        let spec = SyntheticCorpusSpec {
            qa_only_fraction: 0.5,
            qa_pairs_mean: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&spec).is_err());
        let spec = SyntheticCorpusSpec {
            aspect_pool: vec![],
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&spec).is_err());
    }
}
