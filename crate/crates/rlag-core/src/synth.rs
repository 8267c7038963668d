//! Deterministic closed-world fact generator.
//!
//! Builds three coupled artifacts from one seed:
//!
//! * a generic pretraining corpus that teaches sentence structure, the
//!   question/answer format, and the copy-from-literature skill on a
//!   disjoint generic lexicon;
//! * a knowledge base of fact documents (several one-sentence facts each)
//!   whose entities and values never occur in the generic corpus, so a base
//!   model provably lacks them;
//! * one multiple-choice question per fact with same-type distractor values,
//!   split 80/10/10 by fact with balanced gold positions.
//!
//! Every question token trigram contains the fact's unique entity, so the
//! trigram decontamination filter passes the generated splits untouched while
//! still catching genuinely overlapping questions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::Vocabulary;
use crate::sampler::{save_dataset, McqInstance};

const ATTRIBUTES: [&str; 10] = [
    "capital", "color", "founder", "anthem", "mascot", "currency", "festival", "emblem",
    "export", "climate",
];

const FACT_SYLLABLES: [&str; 20] = [
    "za", "ble", "kor", "mun", "vex", "tol", "qui", "dra", "fen", "gos", "lim", "pra", "sku",
    "tre", "wol", "xan", "yor", "zem", "bri", "clo",
];

const GENERIC_SYLLABLES: [&str; 20] = [
    "nor", "est", "hav", "mel", "sut", "ria", "lod", "pen", "gar", "voo", "dil", "tam", "cru",
    "bel", "ost", "ula", "ift", "ond", "arl", "ume",
];

/// One synthetic fact and its canonical sentence.
#[derive(Debug, Clone)]
pub struct FactRecord {
    pub fact_id: usize,
    pub entity: String,
    pub attribute: String,
    pub value: String,
    pub sentence: String,
}

/// Generator knobs. `n_facts` and `n_distractors` shape the dataset; the
/// rest size the generic pretraining corpus.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_facts: usize,
    pub n_distractors: usize,
    pub facts_per_doc: usize,
    pub n_generic_facts: usize,
    /// Literature sentences per augmented pretraining example.
    pub generic_context_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            n_facts: 200,
            n_distractors: 3,
            facts_per_doc: 5,
            n_generic_facts: 240,
            generic_context_size: 3,
        }
    }
}

/// Everything `generate_world` emits, in memory.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub facts: Vec<FactRecord>,
    pub corpus_docs: Vec<(String, String)>,
    pub kb_docs: Vec<(String, String)>,
    pub train: Vec<McqInstance>,
    pub valid: Vec<McqInstance>,
    pub test: Vec<McqInstance>,
}

struct WordMint {
    used: BTreeSet<String>,
}

impl WordMint {
    fn new() -> Self {
        WordMint {
            used: ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Draws a fresh 2-3 syllable word from the inventory. Words are unique
    /// across the whole world, which is what keeps fact values out of the
    /// generic corpus by construction.
    fn coin(&mut self, rng: &mut ChaCha8Rng, syllables: &[&str]) -> Result<String> {
        for _ in 0..1000 {
            let n = rng.gen_range(2..=3);
            let word: String = (0..n)
                .map(|_| syllables[rng.gen_range(0..syllables.len())])
                .collect();
            if self.used.insert(word.clone()) {
                return Ok(word);
            }
        }
        Err(Error::contract(
            "lexicon exhaustion: increase the syllable inventory or lower the word demand",
        ))
    }
}

fn question_text(fact: &FactRecord) -> String {
    // every trigram carries the unique entity token
    format!("{} of {} ?", fact.attribute, fact.entity)
}

fn fact_sentence(attribute: &str, entity: &str, value: &str) -> String {
    format!("the {attribute} of {entity} is {value} .")
}

/// Balanced gold positions: a shuffled deck cycling `0..n_options`, so every
/// split is uniform up to one count.
fn balanced_positions(n: usize, options: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut deck: Vec<usize> = (0..n).map(|i| i % options).collect();
    deck.shuffle(rng);
    deck
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    if cfg.n_facts < 40 {
        return Err(Error::contract(format!(
            "need at least 40 facts for stable splits, got {}",
            cfg.n_facts
        )));
    }
    let facts_per_attr = cfg.n_facts.div_ceil(ATTRIBUTES.len());
    if facts_per_attr <= cfg.n_distractors {
        return Err(Error::contract(format!(
            "lexicon exhaustion: {} facts per attribute cannot supply {} distinct distractors",
            facts_per_attr, cfg.n_distractors
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mint = WordMint::new();

    // -- facts over the fact lexicon -----------------------------------------
    let mut facts = Vec::with_capacity(cfg.n_facts);
    for fact_id in 0..cfg.n_facts {
        let attribute = ATTRIBUTES[fact_id % ATTRIBUTES.len()].to_string();
        let entity = mint.coin(&mut rng, &FACT_SYLLABLES)?;
        let value = mint.coin(&mut rng, &FACT_SYLLABLES)?;
        let sentence = fact_sentence(&attribute, &entity, &value);
        facts.push(FactRecord {
            fact_id,
            entity,
            attribute,
            value,
            sentence,
        });
    }

    // -- knowledge base: shuffled facts grouped into documents ----------------
    let mut order: Vec<usize> = (0..cfg.n_facts).collect();
    order.shuffle(&mut rng);
    let mut kb_docs = Vec::new();
    for (doc_idx, group) in order.chunks(cfg.facts_per_doc).enumerate() {
        let text = group
            .iter()
            .map(|&i| facts[i].sentence.clone())
            .collect::<Vec<_>>()
            .join(" ");
        kb_docs.push((format!("doc_{doc_idx:03}.txt"), text));
    }

    // -- generic pretraining corpus -------------------------------------------
    let mut generic = Vec::with_capacity(cfg.n_generic_facts);
    for i in 0..cfg.n_generic_facts {
        let attribute = ATTRIBUTES[i % ATTRIBUTES.len()].to_string();
        let entity = mint.coin(&mut rng, &GENERIC_SYLLABLES)?;
        let value = mint.coin(&mut rng, &GENERIC_SYLLABLES)?;
        generic.push((attribute, entity, value));
    }

    let prose: Vec<String> = generic
        .iter()
        .map(|(a, e, v)| fact_sentence(a, e, v))
        .collect();

    let naive_qa: Vec<String> = generic
        .iter()
        .map(|(a, e, v)| format!("question: {a} of {e} ? answer: {v} ."))
        .collect();

    // augmented examples: literature block of a few prose facts, one of which
    // answers the question; the others are decoys
    let mut augmented_qa = Vec::with_capacity(generic.len());
    for (i, (a, e, v)) in generic.iter().enumerate() {
        let mut ctx_ids: Vec<usize> = vec![i];
        while ctx_ids.len() < cfg.generic_context_size.min(generic.len()) {
            let cand = rng.gen_range(0..generic.len());
            if !ctx_ids.contains(&cand) {
                ctx_ids.push(cand);
            }
        }
        ctx_ids.shuffle(&mut rng);
        let ctx: Vec<String> = ctx_ids.iter().map(|&j| prose[j].clone()).collect();
        augmented_qa.push(format!(
            "related literature: {}\nquestion: {a} of {e} ? answer: {v} .",
            ctx.join("\n")
        ));
    }

    let corpus_docs = vec![
        ("generic_prose.txt".to_string(), prose.join("\n")),
        ("qa_naive.txt".to_string(), naive_qa.join("\n")),
        ("qa_augmented.txt".to_string(), augmented_qa.join("\n")),
    ];

    // -- splits and MCQs -------------------------------------------------------
    let mut split_order: Vec<usize> = (0..cfg.n_facts).collect();
    split_order.shuffle(&mut rng);
    let n_test = cfg.n_facts / 10;
    let n_valid = cfg.n_facts / 10;
    let n_train = cfg.n_facts - n_test - n_valid;
    let (train_ids, rest) = split_order.split_at(n_train);
    let (valid_ids, test_ids) = rest.split_at(n_valid);

    let n_options = cfg.n_distractors + 1;
    let mut build_split = |ids: &[usize], tag: &str, rng: &mut ChaCha8Rng| -> Result<Vec<McqInstance>> {
        let positions = balanced_positions(ids.len(), n_options, rng);
        let mut out = Vec::with_capacity(ids.len());
        for (k, &fid) in ids.iter().enumerate() {
            let fact = &facts[fid];
            // same-type distractors: other facts' values under this attribute
            let pool: Vec<&str> = facts
                .iter()
                .filter(|f| f.attribute == fact.attribute && f.fact_id != fid)
                .map(|f| f.value.as_str())
                .collect();
            if pool.len() < cfg.n_distractors {
                return Err(Error::contract(format!(
                    "lexicon exhaustion: attribute {} has only {} alternative values",
                    fact.attribute,
                    pool.len()
                )));
            }
            let mut distractors: Vec<&str> = Vec::with_capacity(cfg.n_distractors);
            while distractors.len() < cfg.n_distractors {
                let cand = pool[rng.gen_range(0..pool.len())];
                if !distractors.contains(&cand) {
                    distractors.push(cand);
                }
            }
            let gold_index = positions[k];
            let mut options: Vec<String> = Vec::with_capacity(n_options);
            let mut d_iter = distractors.into_iter();
            for slot in 0..n_options {
                if slot == gold_index {
                    options.push(fact.value.clone());
                } else {
                    options.push(d_iter.next().expect("enough distractors").to_string());
                }
            }
            out.push(McqInstance {
                id: format!("{tag}{:04}", fact.fact_id),
                question: question_text(fact),
                options,
                gold_index,
                snippet_ids: vec![],
            });
        }
        Ok(out)
    };

    let train = build_split(train_ids, "q", &mut rng)?;
    let valid = build_split(valid_ids, "q", &mut rng)?;
    let test = build_split(test_ids, "q", &mut rng)?;

    Ok(World {
        config: cfg.clone(),
        facts,
        corpus_docs,
        kb_docs,
        train,
        valid,
        test,
    })
}

/// Removes every training question sharing any token 3-gram (or `n`-gram)
/// with any test question.
pub fn decontaminate(train: &[McqInstance], test: &[McqInstance], n: usize) -> Vec<McqInstance> {
    let grams = |text: &str| -> BTreeSet<Vec<String>> {
        let toks: Vec<String> = text.split_whitespace().map(|t| t.to_lowercase()).collect();
        if toks.len() < n {
            return BTreeSet::new();
        }
        toks.windows(n).map(|w| w.to_vec()).collect()
    };
    let mut test_grams: BTreeSet<Vec<String>> = BTreeSet::new();
    for t in test {
        test_grams.extend(grams(&t.question));
    }
    train
        .iter()
        .filter(|inst| grams(&inst.question).is_disjoint(&test_grams))
        .cloned()
        .collect()
}

impl World {
    /// Vocabulary over everything the world can ever feed the tokenizer:
    /// corpus and KB text, questions, options, and the prompt template words.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut texts: Vec<&str> = vec!["related literature: question: answer:"];
        texts.extend(self.corpus_docs.iter().map(|(_, t)| t.as_str()));
        texts.extend(self.kb_docs.iter().map(|(_, t)| t.as_str()));
        let mut owned: Vec<String> = Vec::new();
        for split in [&self.train, &self.valid, &self.test] {
            for inst in split {
                owned.push(inst.question.clone());
                owned.extend(inst.options.iter().cloned());
            }
        }
        let mut all: Vec<&str> = texts;
        all.extend(owned.iter().map(|s| s.as_str()));
        Vocabulary::build(all)
    }

    /// Writes `corpus/*.txt`, `kb/*.txt`, the three dataset JSONL files, and
    /// `vocab.txt` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let io_err = |p: &Path, e| Error::io(p.display().to_string(), e);
        let corpus = dir.join("corpus");
        let kb = dir.join("kb");
        std::fs::create_dir_all(&corpus).map_err(|e| io_err(&corpus, e))?;
        std::fs::create_dir_all(&kb).map_err(|e| io_err(&kb, e))?;
        for (name, text) in &self.corpus_docs {
            let p = corpus.join(name);
            std::fs::write(&p, format!("{text}\n")).map_err(|e| io_err(&p, e))?;
        }
        for (name, text) in &self.kb_docs {
            let p = kb.join(name);
            std::fs::write(&p, format!("{text}\n")).map_err(|e| io_err(&p, e))?;
        }
        save_dataset(&self.train, &dir.join("train.jsonl"))?;
        save_dataset(&self.valid, &dir.join("valid.jsonl"))?;
        save_dataset(&self.test, &dir.join("test.jsonl"))?;
        self.vocabulary().save(&dir.join("vocab.txt"))?;
        Ok(())
    }
}
