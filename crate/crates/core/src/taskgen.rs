// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multiple-choice corpus.
//!
//! Two question families share one canonical template:
//!
//! ```text
//! Q <subject> <relation> ? A <opt0> B <opt1> C <opt2> D <opt3> =
//! ```
//!
//! followed in training sequences by the answer span `<letter> <object>`.
//! Fact questions ask for the object of a random `(subject, relation)` pair
//! and can only be answered by memorization. Arithmetic questions
//! (`n<a> +<k>` asks for `(a + k) mod m`) form the retain family that fact
//! unlearning should leave intact.
//!
//! Facts are partitioned into a memorized pool (used by `lm_train`,
//! `easy_cal` and `easy_val`) and a held-out pool (`hard_val`,
//! `hard_test`) that the language model never sees.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, seeded, stream_id};

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
pub const N_OPTIONS: usize = 4;

/// Token positions in the canonical template.
pub mod layout {
    /// Prompt length, up to and including `=`.
    pub const PROMPT_LEN: usize = 13;
    /// The `?` closing the question; the "before answer" tap.
    pub const QUESTION_END: usize = 3;
    /// The `=` whose next-token logits choose the answer letter.
    pub const ANSWER_POS: usize = 12;
    /// The emitted answer letter; the "after answer" tap.
    pub const LETTER_POS: usize = 13;
    /// Prompt plus the two-token answer span.
    pub const FULL_LEN: usize = 15;
    /// Position of option `i`'s object token.
    pub const fn option_pos(i: usize) -> usize {
        5 + 2 * i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fact,
    Arith,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    LmTrain,
    EasyCal,
    EasyVal,
    HardVal,
    HardTest,
    Retain,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::LmTrain,
        Split::EasyCal,
        Split::EasyVal,
        Split::HardVal,
        Split::HardTest,
        Split::Retain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::LmTrain => "lm_train",
            Split::EasyCal => "easy_cal",
            Split::EasyVal => "easy_val",
            Split::HardVal => "hard_val",
            Split::HardTest => "hard_test",
            Split::Retain => "retain",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(subject, relation) -> object` triple, by symbol index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// One rendered multiple-choice question. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqExample {
    pub id: String,
    pub family: Family,
    pub question_tokens: Vec<String>,
    pub options: Vec<String>,
    pub gold_index: usize,
    pub split: Split,
}

impl McqExample {
    /// `(subject, relation)` symbols of the question.
    pub fn key(&self) -> (&str, &str) {
        (&self.question_tokens[1], &self.question_tokens[2])
    }

    pub fn gold_object(&self) -> &str {
        &self.options[self.gold_index]
    }

    /// Checks the canonical template shape.
    pub fn validate(&self) -> Result<()> {
        let t = &self.question_tokens;
        let bad = |why: &str| Err(Error::Template(format!("{}: {why}", self.id)));
        if t.len() != layout::PROMPT_LEN {
            return bad("wrong prompt length");
        }
        if self.options.len() != N_OPTIONS {
            return bad("need exactly 4 options");
        }
        if self.gold_index >= N_OPTIONS {
            return bad("gold index out of range");
        }
        if t[0] != "Q" || t[layout::QUESTION_END] != "?" || t[layout::ANSWER_POS] != "=" {
            return bad("markers misplaced");
        }
        for (i, opt) in self.options.iter().enumerate() {
            if t[layout::option_pos(i) - 1] != LETTERS[i] || &t[layout::option_pos(i)] != opt {
                return bad("options disagree with prompt");
            }
        }
        let gold = self.gold_object();
        if self.options.iter().filter(|o| *o == gold).count() != 1 {
            return bad("gold must appear exactly once");
        }
        Ok(())
    }
}

/// Symbol inventory. The vocabulary is fully determined by these counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    /// Objects each relation may take; distractors come from this pool.
    pub objects_per_relation: usize,
    pub modulus: usize,
    pub n_ops: usize,
}

impl Default for SymbolSpec {
    fn default() -> Self {
        SymbolSpec {
            n_subjects: 64,
            n_relations: 8,
            n_objects: 32,
            objects_per_relation: 8,
            modulus: 10,
            n_ops: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorPolicy {
    /// Distractors are other objects of the same relation.
    SameRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub lm_train_renders_per_fact: usize,
    pub lm_train_arith: usize,
    pub easy_cal_fact: usize,
    pub easy_cal_arith: usize,
    pub easy_val_fact: usize,
    pub easy_val_arith: usize,
    pub hard_val: usize,
    pub hard_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            lm_train_renders_per_fact: 64,
            lm_train_arith: 6000,
            easy_cal_fact: 500,
            easy_cal_arith: 500,
            easy_val_fact: 250,
            easy_val_arith: 250,
            hard_val: 150,
            hard_test: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub symbols: SymbolSpec,
    pub n_facts_train: usize,
    pub n_facts_hard: usize,
    /// Leading share of the hard facts reserved for `hard_val`.
    pub n_facts_hard_val: usize,
    pub n_retain: usize,
    pub distractor_policy: DistractorPolicy,
    pub split_sizes: SplitSizes,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 17,
            symbols: SymbolSpec::default(),
            n_facts_train: 96,
            n_facts_hard: 160,
            n_facts_hard_val: 60,
            n_retain: 200,
            distractor_policy: DistractorPolicy::SameRelation,
            split_sizes: SplitSizes::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.symbols;
        let pairs = s.n_subjects * s.n_relations;
        if self.n_facts_train + self.n_facts_hard > pairs {
            return Err(Error::Config(format!(
                "{} facts requested but only {pairs} (subject, relation) pairs exist",
                self.n_facts_train + self.n_facts_hard
            )));
        }
        if self.n_facts_hard_val > self.n_facts_hard {
            return Err(Error::Config("n_facts_hard_val exceeds n_facts_hard".into()));
        }
        if s.objects_per_relation < N_OPTIONS || s.objects_per_relation > s.n_objects {
            return Err(Error::InsufficientDistractors(format!(
                "objects_per_relation must lie in [{N_OPTIONS}, n_objects]"
            )));
        }
        if s.modulus < N_OPTIONS + 1 || s.n_ops == 0 || s.n_ops >= s.modulus {
            return Err(Error::Config("need modulus >= 5 and 1 <= n_ops < modulus".into()));
        }
        if self.n_facts_train == 0 {
            return Err(Error::Config("need at least one training fact".into()));
        }
        let sz = &self.split_sizes;
        let hard_test_facts = self.n_facts_hard - self.n_facts_hard_val;
        if (sz.hard_val > 0 && self.n_facts_hard_val == 0) || (sz.hard_test > 0 && hard_test_facts == 0) {
            return Err(Error::Config("hard splits need hard facts".into()));
        }
        Ok(())
    }
}

/// Token vocabulary: specials, numbers, ops, relations, objects, subjects.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const SPECIALS: [&str; 7] = ["Q", "?", "A", "B", "C", "D", "="];

impl Vocab {
    pub fn new(s: &SymbolSpec) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|t| t.to_string()).collect();
        tokens.extend((0..s.modulus).map(number_token));
        tokens.extend((1..=s.n_ops).map(op_token));
        tokens.extend((0..s.n_relations).map(|i| format!("r{i}")));
        tokens.extend((0..s.n_objects).map(|i| format!("o{i}")));
        tokens.extend((0..s.n_subjects).map(|i| format!("s{i}")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Template(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn letter_ids(&self) -> [usize; N_OPTIONS] {
        // specials are laid out first, A..D at 2..=5
        [2, 3, 4, 5]
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

fn number_token(n: usize) -> String {
    format!("n{n}")
}

fn op_token(k: usize) -> String {
    format!("+{k}")
}

fn subject_token(i: usize) -> String {
    format!("s{i}")
}

fn relation_token(i: usize) -> String {
    format!("r{i}")
}

fn object_token(i: usize) -> String {
    format!("o{i}")
}

/// All facts plus the memorized / held-out partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    /// Object pool of every relation.
    pub relation_objects: Vec<Vec<usize>>,
    pub train: Vec<Fact>,
    pub hard_val: Vec<Fact>,
    pub hard_test: Vec<Fact>,
}

impl Universe {
    pub fn hard(&self) -> impl Iterator<Item = &Fact> {
        self.hard_val.iter().chain(&self.hard_test)
    }
}

pub fn generate_universe(spec: &CorpusSpec) -> Result<Universe> {
    spec.validate()?;
    let s = &spec.symbols;
    let mut rng = seeded(derive(spec.seed, stream_id("universe"), 0));
    let all_objects: Vec<usize> = (0..s.n_objects).collect();
    let relation_objects: Vec<Vec<usize>> = (0..s.n_relations)
        .map(|_| {
            let mut pool: Vec<usize> = all_objects
                .choose_multiple(&mut rng, s.objects_per_relation)
                .copied()
                .collect();
            pool.sort_unstable();
            pool
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..s.n_subjects)
        .flat_map(|subj| (0..s.n_relations).map(move |rel| (subj, rel)))
        .collect();
    pairs.shuffle(&mut rng);
    let n = spec.n_facts_train + spec.n_facts_hard;
    let facts: Vec<Fact> = pairs[..n]
        .iter()
        .map(|&(subject, relation)| {
            let pool = &relation_objects[relation];
            Fact {
                subject,
                relation,
                object: pool[rng.random_range(0..pool.len())],
            }
        })
        .collect();
    let (train, hard) = facts.split_at(spec.n_facts_train);
    let (hard_val, hard_test) = hard.split_at(spec.n_facts_hard_val);
    Ok(Universe {
        relation_objects,
        train: train.to_vec(),
        hard_val: hard_val.to_vec(),
        hard_test: hard_test.to_vec(),
    })
}

fn assemble(
    id: String,
    family: Family,
    subject: String,
    relation: String,
    gold: String,
    distractors: Vec<String>,
    split: Split,
    rng: &mut impl Rng,
) -> McqExample {
    let gold_index = rng.random_range(0..N_OPTIONS);
    let mut rest = distractors.into_iter();
    let options: Vec<String> = (0..N_OPTIONS)
        .map(|i| {
            if i == gold_index {
                gold.clone()
            } else {
                rest.next().expect("three distractors")
            }
        })
        .collect();
    let mut question_tokens = vec!["Q".to_string(), subject, relation, "?".to_string()];
    for (letter, opt) in LETTERS.iter().zip(&options) {
        question_tokens.push(letter.to_string());
        question_tokens.push(opt.clone());
    }
    question_tokens.push("=".to_string());
    McqExample {
        id,
        family,
        question_tokens,
        options,
        gold_index,
        split,
    }
}

/// Renders a fact as a question whose three distractors are other objects
/// of the same relation, with the gold position drawn uniformly.
pub fn render_mcq(
    fact: &Fact,
    universe: &Universe,
    id: String,
    split: Split,
    rng: &mut impl Rng,
) -> Result<McqExample> {
    let pool = universe
        .relation_objects
        .get(fact.relation)
        .ok_or_else(|| Error::Index(format!("relation {} unknown", fact.relation)))?;
    let candidates: Vec<usize> = pool.iter().copied().filter(|&o| o != fact.object).collect();
    if candidates.len() < N_OPTIONS - 1 {
        return Err(Error::InsufficientDistractors(format!(
            "relation r{} has {} alternatives to o{}",
            fact.relation,
            candidates.len(),
            fact.object
        )));
    }
    let mut distractors: Vec<String> = candidates
        .choose_multiple(rng, N_OPTIONS - 1)
        .map(|&o| object_token(o))
        .collect();
    distractors.shuffle(rng);
    Ok(assemble(
        id,
        Family::Fact,
        subject_token(fact.subject),
        relation_token(fact.relation),
        object_token(fact.object),
        distractors,
        split,
        rng,
    ))
}

/// `n<a> +<k>` asks for `(a + k) mod modulus`; distractors are other numbers,
/// never the operand itself.
pub fn render_arith(
    a: usize,
    k: usize,
    symbols: &SymbolSpec,
    id: String,
    split: Split,
    rng: &mut impl Rng,
) -> McqExample {
    let m = symbols.modulus;
    let answer = (a + k) % m;
    let candidates: Vec<usize> = (0..m).filter(|&x| x != answer && x != a).collect();
    let mut distractors: Vec<String> = candidates
        .choose_multiple(rng, N_OPTIONS - 1)
        .map(|&x| number_token(x))
        .collect();
    distractors.shuffle(rng);
    assemble(
        id,
        Family::Arith,
        number_token(a),
        op_token(k),
        number_token(answer),
        distractors,
        split,
        rng,
    )
}

/// Builds every split. Facts are visited round-robin in a per-split shuffled
/// order so each split covers its fact pool as evenly as possible.
pub fn make_splits(spec: &CorpusSpec) -> Result<BTreeMap<Split, Vec<McqExample>>> {
    let universe = generate_universe(spec)?;
    let sz = &spec.split_sizes;
    let sym = &spec.symbols;
    let mut out = BTreeMap::new();

    let facts_split = |split: Split, pool: &[Fact], count: usize| -> Result<Vec<McqExample>> {
        let mut rng = seeded(derive(spec.seed, stream_id(split.as_str()), 0));
        let mut order: Vec<&Fact> = pool.iter().collect();
        order.shuffle(&mut rng);
        (0..count)
            .map(|i| {
                let fact = order[i % order.len()];
                render_mcq(fact, &universe, format!("{split}-fact-{i:05}"), split, &mut rng)
            })
            .collect()
    };
    let arith_split = |split: Split, count: usize| -> Vec<McqExample> {
        let mut rng = seeded(derive(spec.seed, stream_id(split.as_str()), 1));
        let mut combos: Vec<(usize, usize)> = (0..sym.modulus)
            .flat_map(|a| (1..=sym.n_ops).map(move |k| (a, k)))
            .collect();
        combos.shuffle(&mut rng);
        (0..count)
            .map(|i| {
                let (a, k) = combos[i % combos.len()];
                render_arith(a, k, sym, format!("{split}-arith-{i:05}"), split, &mut rng)
            })
            .collect()
    };

    let mut lm = facts_split(
        Split::LmTrain,
        &universe.train,
        universe.train.len() * sz.lm_train_renders_per_fact,
    )?;
    lm.extend(arith_split(Split::LmTrain, sz.lm_train_arith));
    out.insert(Split::LmTrain, lm);

    let mut cal = facts_split(Split::EasyCal, &universe.train, sz.easy_cal_fact)?;
    cal.extend(arith_split(Split::EasyCal, sz.easy_cal_arith));
    out.insert(Split::EasyCal, cal);

    let mut val = facts_split(Split::EasyVal, &universe.train, sz.easy_val_fact)?;
    val.extend(arith_split(Split::EasyVal, sz.easy_val_arith));
    out.insert(Split::EasyVal, val);

    out.insert(
        Split::HardVal,
        facts_split(Split::HardVal, &universe.hard_val, sz.hard_val)?,
    );
    out.insert(
        Split::HardTest,
        facts_split(Split::HardTest, &universe.hard_test, sz.hard_test)?,
    );
    out.insert(Split::Retain, arith_split(Split::Retain, spec.n_retain));
    Ok(out)
}

/// 1 iff the predicted option is the gold one.
pub fn exact_match(predicted: usize, gold: usize) -> Result<u8> {
    if predicted >= N_OPTIONS || gold >= N_OPTIONS {
        return Err(Error::Index(format!(
            "option indices ({predicted}, {gold}) outside [0, {N_OPTIONS})"
        )));
    }
    Ok(u8::from(predicted == gold))
}

/// Mean of exact-match labels.
pub fn accuracy(labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().map(|&l| f64::from(l)).sum::<f64>() / labels.len() as f64
}

/// Serializes examples as JSONL, one object per line, `\n` terminated.
pub fn to_jsonl(examples: &[McqExample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_jsonl(path: &Path, examples: &[McqExample]) -> Result<()> {
    let bytes = to_jsonl(examples)?;
    crate::harness::io::write_atomic(path, &bytes)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<McqExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let ex: McqExample = serde_json::from_str(line)?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes examples through any writer (used by the CLI for stdout dumps).
pub fn dump(examples: &[McqExample], mut w: impl Write) -> Result<()> {
    let bytes = to_jsonl(examples)?;
    w.write_all(&bytes).map_err(|e| Error::io("<stream>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_facts_train: 100,
            n_facts_hard: 40,
            n_facts_hard_val: 10,
            n_retain: 30,
            split_sizes: SplitSizes {
                lm_train_renders_per_fact: 2,
                lm_train_arith: 50,
                easy_cal_fact: 60,
                easy_cal_arith: 20,
                easy_val_fact: 30,
                easy_val_arith: 10,
                hard_val: 15,
                hard_test: 40,
            },
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn universe_is_deterministic_and_sized() {
        let spec = small_spec();
        let a = generate_universe(&spec).unwrap();
        let b = generate_universe(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 100);
        assert_eq!(a.hard_val.len() + a.hard_test.len(), 40);
        assert_eq!(a.hard_val.len(), 10);
    }

    #[test]
    fn train_and_hard_facts_are_disjoint() {
        let u = generate_universe(&small_spec()).unwrap();
        let train: HashSet<_> = u.train.iter().map(|f| (f.subject, f.relation)).collect();
        assert!(u.hard().all(|f| !train.contains(&(f.subject, f.relation))));
    }

    #[test]
    fn rendered_questions_follow_template() {
        let spec = small_spec();
        let u = generate_universe(&spec).unwrap();
        let mut rng = seeded(3);
        for (i, f) in u.train.iter().enumerate() {
            let ex = render_mcq(f, &u, format!("x{i}"), Split::EasyCal, &mut rng).unwrap();
            ex.validate().unwrap();
            assert_eq!(ex.gold_object(), format!("o{}", f.object));
            assert_eq!(ex.question_tokens.len(), layout::PROMPT_LEN);
            assert_eq!(ex.question_tokens[layout::QUESTION_END], "?");
            let pool: HashSet<String> = u.relation_objects[f.relation]
                .iter()
                .map(|&o| object_token(o))
                .collect();
            assert!(ex.options.iter().all(|o| pool.contains(o)));
        }
    }

    #[test]
    fn too_few_distractors_is_an_error() {
        let u = Universe {
            relation_objects: vec![vec![0, 1, 2]],
            train: vec![],
            hard_val: vec![],
            hard_test: vec![],
        };
        let f = Fact {
            subject: 0,
            relation: 0,
            object: 1,
        };
        let err = render_mcq(&f, &u, "x".into(), Split::EasyCal, &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientDistractors(_)));
    }

    #[test]
    fn gold_position_is_uniform() {
        let spec = CorpusSpec::default();
        let u = generate_universe(&spec).unwrap();
        let mut rng = seeded(11);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for i in 0..n {
            let f = &u.train[i % u.train.len()];
            let ex = render_mcq(f, &u, String::new(), Split::EasyCal, &mut rng).unwrap();
            counts[ex.gold_index] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square(3 dof) upper 0.001 quantile
        assert!(chi2 < 16.266_236, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn splits_are_disjoint_and_well_founded() {
        let spec = small_spec();
        let splits = make_splits(&spec).unwrap();
        let mut ids = HashSet::new();
        for exs in splits.values() {
            for ex in exs {
                assert!(ids.insert(ex.id.clone()), "duplicate id {}", ex.id);
                ex.validate().unwrap();
            }
        }
        let train_keys: HashSet<(String, String)> = splits[&Split::LmTrain]
            .iter()
            .filter(|e| e.family == Family::Fact)
            .map(|e| (e.key().0.to_string(), e.key().1.to_string()))
            .collect();
        for split in [Split::EasyCal, Split::EasyVal] {
            for ex in splits[&split].iter().filter(|e| e.family == Family::Fact) {
                let k = (ex.key().0.to_string(), ex.key().1.to_string());
                assert!(train_keys.contains(&k));
            }
        }
        for split in [Split::HardVal, Split::HardTest] {
            for ex in &splits[&split] {
                assert_eq!(ex.family, Family::Fact);
                let k = (ex.key().0.to_string(), ex.key().1.to_string());
                assert!(!train_keys.contains(&k));
            }
        }
        assert!(splits[&Split::Retain].iter().all(|e| e.family == Family::Arith));
        assert_eq!(splits[&Split::EasyCal].len(), 80);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = small_spec();
        let a = make_splits(&spec).unwrap();
        let b = make_splits(&spec).unwrap();
        for split in Split::ALL {
            assert_eq!(to_jsonl(&a[&split]).unwrap(), to_jsonl(&b[&split]).unwrap());
        }
    }

    #[test]
    fn jsonl_key_order_is_fixed() {
        let splits = make_splits(&small_spec()).unwrap();
        let bytes = to_jsonl(&splits[&Split::Retain][..1]).unwrap();
        let line = String::from_utf8(bytes).unwrap();
        let positions: Vec<usize> = [
            "\"id\"",
            "\"family\"",
            "\"question_tokens\"",
            "\"options\"",
            "\"gold_index\"",
            "\"split\"",
        ]
        .iter()
        .map(|k| line.find(k).unwrap())
        .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(line.ends_with('\n'));
        assert!(line.contains("\"split\":\"retain\""));
    }

    #[test]
    fn arithmetic_answers_are_correct() {
        let sym = SymbolSpec::default();
        let ex = render_arith(7, 4, &sym, "a".into(), Split::Retain, &mut seeded(1));
        assert_eq!(ex.gold_object(), "n1");
        ex.validate().unwrap();
    }

    #[test]
    fn exact_match_labels() {
        assert_eq!(exact_match(2, 2).unwrap(), 1);
        assert_eq!(exact_match(0, 3).unwrap(), 0);
        assert!(exact_match(4, 0).is_err());
        assert_eq!(accuracy(&[1, 0, 1, 1]), 0.75);
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocab::new(&SymbolSpec::default());
        assert_eq!(v.len(), 7 + 10 + 4 + 8 + 32 + 64);
        for (i, l) in LETTERS.iter().enumerate() {
            assert_eq!(v.id(l).unwrap(), v.letter_ids()[i]);
        }
        assert!(v.id("zzz").is_err());
    }
}
