//! Synthetic four-table dataset generator.
//!
//! Merchants are shared across companies (so test categories can be unseen
//! in one company's history while known globally), merchant popularity is
//! Zipf-skewed (inducing the long-tail category distribution), and a slice
//! of merchants is personalized: different companies file the same merchant
//! under different categories, which text alone cannot resolve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::store::{DbBuilder, RelationalDatabase};

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_companies: usize,
    pub num_merchants: usize,
    /// Popularity skew; 0 is uniform.
    pub zipf_exponent: f64,
    pub transactions_per_company: (usize, usize),
    /// Probability a description gets abbreviated/mangled.
    pub abbreviation_noise_rate: f64,
    /// Probability a transaction carries a memo.
    pub memo_rate: f64,
    /// Fraction of expense merchants whose category depends on the company.
    pub personalization_rate: f64,
    /// Probability a company's final transaction uses a merchant new to it.
    pub new_merchant_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_companies: 200,
            num_merchants: 60,
            zipf_exponent: 1.1,
            transactions_per_company: (80, 120),
            abbreviation_noise_rate: 0.3,
            memo_rate: 0.25,
            personalization_rate: 0.3,
            new_merchant_rate: 0.25,
            seed: 42,
        }
    }
}

/// (code name, category names under it, amounts are income)
const CATALOG: &[(&str, &[&str], bool)] = &[
    (
        "Business Expenses",
        &[
            "Fuel",
            "Office Supplies",
            "Software Subscriptions",
            "Advertising",
            "Insurance",
            "Repairs and Maintenance",
            "Shipping and Postage",
            "Bank Fees",
        ],
        false,
    ),
    (
        "Cost of Goods Sold",
        &["Inventory Purchases", "Packaging Materials", "Raw Materials"],
        false,
    ),
    (
        "Income",
        &["Sales Revenue", "Service Income", "Interest Income"],
        true,
    ),
    (
        "Travel and Meals",
        &["Airfare", "Lodging", "Meals and Entertainment", "Rideshare and Taxi"],
        false,
    ),
    (
        "Utilities and Rent",
        &["Electricity", "Internet and Phone", "Office Rent", "Water and Sewer"],
        false,
    ),
    (
        "Payroll and Taxes",
        &["Contract Labor", "Payroll Taxes"],
        false,
    ),
];

const NAME_HEADS: &[&str] = &[
    "NOR", "VEL", "QUANT", "TRI", "BLU", "CRES", "DELT", "EVER", "FOX", "GRAN", "HAL", "IRON",
    "JUNIP", "KILN", "LUM", "MERID", "NOV", "ORB", "PINN", "QUIL", "RIDG", "SOL", "TALL", "UMB",
    "VANT", "WREN", "XEN", "YON", "ZEPH", "ARC",
];
const NAME_TAILS: &[&str] = &[
    "EX", "ON", "IA", "ETTE", "CO", "ANT", "ERA", "IS", "URA", "ENT", "OVA", "ICK", "ARD", "ILO",
];
const NAME_SUFFIXES: &[&str] = &[
    "", " LLC", " INC", " CORP", " SUPPLY", " SERVICES", " STORE", " MART", " STATION", " CAFE",
    " FREIGHT", " ENERGY", " MEDIA", " LABS",
];
const MEMOS: &[&str] = &[
    "monthly service",
    "auto pay",
    "recurring",
    "invoice 4417",
    "contract work",
    "one time",
    "quarterly",
    "deposit",
];
const CITY_TAGS: &[&str] = &["SEA", "PDX", "SFO", "AUS", "NYC", "CHI", "DEN", "ATL"];

struct Merchant {
    name: String,
    /// index into the flattened category-name list
    primary_category: usize,
    /// personalized merchants carry an alternate same-polarity category
    alternate_category: Option<usize>,
    income: bool,
}

fn category_names() -> Vec<(&'static str, &'static str, bool)> {
    let mut v = Vec::new();
    for (code, cats, income) in CATALOG {
        for c in *cats {
            v.push((*c, *code, *income));
        }
    }
    v
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(exponent)).collect()
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn make_merchants(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Vec<Merchant> {
    let cats = category_names();
    let expense_idxs: Vec<usize> = cats
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.2)
        .map(|(i, _)| i)
        .collect();
    let income_idxs: Vec<usize> = cats
        .iter()
        .enumerate()
        .filter(|(_, c)| c.2)
        .map(|(i, _)| i)
        .collect();
    let mut merchants = Vec::with_capacity(cfg.num_merchants);
    let mut used_names = std::collections::HashSet::new();
    while merchants.len() < cfg.num_merchants {
        let head = NAME_HEADS[rng.gen_range(0..NAME_HEADS.len())];
        let tail = NAME_TAILS[rng.gen_range(0..NAME_TAILS.len())];
        let suffix = NAME_SUFFIXES[rng.gen_range(0..NAME_SUFFIXES.len())];
        let name = format!("{head}{tail}{suffix}");
        if !used_names.insert(name.clone()) {
            continue;
        }
        // roughly one merchant in seven is an income source
        let income = merchants.len() % 7 == 6;
        let primary = if income {
            income_idxs[rng.gen_range(0..income_idxs.len())]
        } else {
            expense_idxs[rng.gen_range(0..expense_idxs.len())]
        };
        let alternate = if !income && rng.gen_bool(cfg.personalization_rate) {
            loop {
                let alt = expense_idxs[rng.gen_range(0..expense_idxs.len())];
                if alt != primary {
                    break Some(alt);
                }
            }
        } else {
            None
        };
        merchants.push(Merchant {
            name,
            primary_category: primary,
            alternate_category: alternate,
            income,
        });
    }
    merchants
}

fn abbreviate(rng: &mut ChaCha8Rng, name: &str) -> String {
    match rng.gen_range(0..3) {
        // drop vowels after the first character
        0 => {
            let mut out = String::new();
            for (i, ch) in name.chars().enumerate() {
                if i == 0 || !"AEIOU".contains(ch) {
                    out.push(ch);
                }
            }
            out
        }
        // hard truncation
        1 => name.chars().take(6.max(name.len() / 2)).collect(),
        // strip spaces and squeeze
        _ => name.chars().filter(|c| !c.is_whitespace()).take(12).collect(),
    }
}

fn description(rng: &mut ChaCha8Rng, merchant: &str, noise_rate: f64) -> String {
    let base = if rng.gen_bool(noise_rate) {
        abbreviate(rng, merchant)
    } else {
        merchant.to_string()
    };
    let decorated = match rng.gen_range(0..4) {
        0 => base,
        1 => format!("{base} {}", rng.gen_range(1..9999)),
        2 => format!("{base} #{}", rng.gen_range(1..999)),
        _ => format!("{base} {}", CITY_TAGS[rng.gen_range(0..CITY_TAGS.len())]),
    };
    // descriptions mimic card-network limits
    decorated.chars().take(25).collect::<String>().trim().to_string()
}

fn amount(rng: &mut ChaCha8Rng, income: bool) -> String {
    let magnitude = (rng.gen_range(5.0f64.ln()..900.0f64.ln())).exp();
    let cents = (magnitude * 100.0).round() / 100.0;
    if income {
        format!("{cents:.2}")
    } else {
        format!("-{cents:.2}")
    }
}

/// Deterministically generate the dataset; the same config (seed included)
/// reproduces it byte for byte.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> RelationalDatabase {
    assert!(cfg.num_companies >= 1 && cfg.num_merchants >= 1);
    assert!(cfg.transactions_per_company.0 >= 1);
    assert!(cfg.transactions_per_company.0 <= cfg.transactions_per_company.1);
    for rate in [
        cfg.abbreviation_noise_rate,
        cfg.memo_rate,
        cfg.personalization_rate,
        cfg.new_merchant_rate,
    ] {
        assert!((0.0..=1.0).contains(&rate), "rates must be in [0,1]");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cats = category_names();
    let merchants = make_merchants(&mut rng, cfg);
    let popularity = zipf_weights(merchants.len(), cfg.zipf_exponent);

    let mut b = DbBuilder::new();
    for (i, (code, _, _)) in CATALOG.iter().enumerate() {
        b.code(&format!("code{:02}", i + 1), code);
    }
    let code_pk_of = |cat_idx: usize| {
        let code_name = cats[cat_idx].1;
        let pos = CATALOG.iter().position(|(c, _, _)| *c == code_name).unwrap();
        format!("code{:02}", pos + 1)
    };

    let mut txn_counter = 0usize;
    for ci in 0..cfg.num_companies {
        let company_pk = format!("co{ci:04}");
        let head = NAME_HEADS[rng.gen_range(0..NAME_HEADS.len())];
        let tail = NAME_TAILS[rng.gen_range(0..NAME_TAILS.len())];
        b.company(&company_pk, &format!("{head}{tail} HOLDINGS {ci}"));

        // popularity-weighted merchant subset without replacement
        let n_merchants = rng.gen_range(4..=10).min(merchants.len());
        let mut pool: Vec<usize> = (0..merchants.len()).collect();
        let mut weights = popularity.clone();
        let mut chosen = Vec::with_capacity(n_merchants);
        for _ in 0..n_merchants {
            let pick = weighted_pick(&mut rng, &weights);
            chosen.push(pool[pick]);
            pool.remove(pick);
            weights.remove(pick);
        }

        // resolve personalization per (company, merchant)
        let resolved: Vec<usize> = chosen
            .iter()
            .map(|&m| match merchants[m].alternate_category {
                Some(alt) if rng.gen_bool(0.5) => alt,
                _ => merchants[m].primary_category,
            })
            .collect();

        // category rows come into being when first used
        let mut cat_row_of: std::collections::HashMap<usize, String> =
            std::collections::HashMap::new();
        let mut next_cat = 0usize;
        let mut ensure_cat_row =
            |cat_idx: usize,
             b: &mut DbBuilder,
             cat_row_of: &mut std::collections::HashMap<usize, String>,
             next_cat: &mut usize| {
                cat_row_of
                    .entry(cat_idx)
                    .or_insert_with(|| {
                        let pk = format!("cat{ci:04}_{:02}", *next_cat);
                        *next_cat += 1;
                        b.category(&pk, &company_pk, &code_pk_of(cat_idx), cats[cat_idx].0);
                        pk
                    })
                    .clone()
            };

        let n_txns = rng.gen_range(cfg.transactions_per_company.0..=cfg.transactions_per_company.1);
        let merchant_weights: Vec<f64> = chosen.iter().map(|&m| popularity[m]).collect();
        let inject_new = rng.gen_bool(cfg.new_merchant_rate);
        let mut day = 0u32;
        for ti in 0..n_txns {
            day += rng.gen_range(1..4);
            let date = format!(
                "2023-{:02}-{:02}",
                1 + (day / 28).min(11),
                1 + day % 28
            );
            let is_last = ti + 1 == n_txns;
            let (merchant_idx, cat_idx) = if is_last && inject_new && pool.len() > 1 {
                // a merchant this company never used before; peers know it
                let w: Vec<f64> = pool.iter().map(|&m| popularity[m]).collect();
                let m = pool[weighted_pick(&mut rng, &w)];
                (m, merchants[m].primary_category)
            } else {
                let k = weighted_pick(&mut rng, &merchant_weights);
                (chosen[k], resolved[k])
            };
            let merchant = &merchants[merchant_idx];
            let cat_row = ensure_cat_row(cat_idx, &mut b, &mut cat_row_of, &mut next_cat);
            let desc = description(&mut rng, &merchant.name, cfg.abbreviation_noise_rate);
            let amt = amount(&mut rng, merchant.income);
            let memo = if rng.gen_bool(cfg.memo_rate) {
                MEMOS[rng.gen_range(0..MEMOS.len())]
            } else {
                ""
            };
            b.txn(
                &format!("t{txn_counter:06}"),
                &company_pk,
                Some(&cat_row),
                &desc,
                &amt,
                memo,
                &date,
            );
            txn_counter += 1;
        }
    }
    b.build()
}

/// Control corpus of plain English for tokenizer comparisons. Coverage lines
/// guarantee every letter and digit appears in both word-initial and
/// continuation positions, so measurements on transaction text never hit
/// unseen characters.
pub fn english_control_corpus(num_lines: usize, seed: u64) -> Vec<String> {
    const WORDS: &[&str] = &[
        "the", "of", "and", "to", "in", "is", "you", "that", "it", "he", "was", "for", "on",
        "are", "as", "with", "his", "they", "at", "be", "this", "have", "from", "or", "one",
        "had", "by", "word", "but", "not", "what", "all", "were", "we", "when", "your", "can",
        "said", "there", "use", "an", "each", "which", "she", "do", "how", "their", "if",
        "will", "up", "other", "about", "out", "many", "then", "them", "these", "so", "some",
        "her", "would", "make", "like", "him", "into", "time", "has", "look", "two", "more",
        "write", "go", "see", "number", "no", "way", "could", "people", "my", "than", "first",
        "water", "been", "call", "who", "oil", "its", "now", "find", "long", "down", "day",
        "did", "get", "come", "made", "may", "part", "over", "new", "sound", "take", "only",
        "little", "work", "know", "place", "year", "live", "me", "back", "give", "most",
        "very", "after", "thing", "our", "just", "name", "good", "sentence", "man", "think",
        "say", "great", "where", "help", "through", "much", "before", "line", "right", "too",
        "mean", "old", "any", "same", "tell", "boy", "follow", "came", "want", "show", "also",
        "around", "form", "three", "small", "set", "put", "end", "does", "another", "well",
        "large", "must", "big", "even", "such", "because", "turn", "here", "why", "ask",
        "went", "men", "read", "need", "land", "different", "home", "us", "move", "try",
        "kind", "hand", "picture", "again", "change", "off", "play", "spell", "air", "away",
        "animal", "house", "point", "page", "letter", "mother", "answer", "found", "study",
        "still", "learn", "should", "america", "world", "high", "every", "near", "add",
        "food", "between", "own", "below", "country", "plant", "last", "school", "father",
        "keep", "tree", "never", "start", "city", "earth", "eye", "light", "thought", "head",
        "under", "story", "saw", "left", "don't", "few", "while", "along", "might", "close",
        "something", "seem", "next", "hard", "open", "example", "begin", "always", "those",
        "both", "paper", "together", "got", "group", "often", "run", "important", "until",
        "children", "side", "feet", "car", "mile", "night", "walk", "white", "sea", "began",
        "grow", "took", "river", "four", "carry", "state", "once", "book", "hear", "stop",
        "without", "second", "later", "miss", "idea", "enough", "eat", "face", "watch",
        "far", "indian", "really", "almost", "let", "above", "girl", "sometimes", "mountain",
        "cut", "young", "talk", "soon", "list", "song", "being", "leave", "family", "zero",
        "quite", "jump", "vex", "extra", "quiz",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(num_lines);
    // coverage lines: every letter and digit in initial and continuation slots
    lines.push("abcdefghijklmnopqrstuvwxyz zyxwvutsrqponmlkjihgfedcba".to_string());
    lines.push("0123456789 9876543210 a0 b1 c2 d3 e4 f5 g6 h7 i8 j9".to_string());
    lines.push("p . o . box # 10 $ 5 . 25 & co : note ' quote".to_string());
    while lines.len() < num_lines.max(4) {
        let n = rng.gen_range(4..11);
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.gen_bool(0.06) {
                words.push(rng.gen_range(0..2000u32).to_string());
            } else {
                words.push(WORDS[rng.gen_range(0..WORDS.len())].to_string());
            }
        }
        lines.push(words.join(" "));
    }
    lines
}
