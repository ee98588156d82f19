//! Deterministic synthetic tasks standing in for classification and
//! generation benchmarks.
//!
//! Every prompt has the shape `"{instruction}\n{data}\nAnswer: "` and the
//! model is trained to complete it with the answer followed by `EOS`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const ANSWER_CUE: &str = "Answer: ";

/// Sentinel prefixes for support-disjoint suites, one per task.
pub const SENTINELS: [u8; 8] = [b'@', b'#', b'$', b'%', b'&', b'*', b'~', b'^'];

const POSITIVE_WORDS: [&str; 8] = ["good", "great", "fun", "nice", "happy", "love", "best", "cool"];
const NEGATIVE_WORDS: [&str; 8] = ["bad", "awful", "sad", "boring", "poor", "hate", "worst", "dull"];
const VOWELS: &[u8] = b"aeiou";
const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxyz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

/// How task performance is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Rouge1,
}

impl TaskKind {
    pub fn metric(self) -> MetricKind {
        match self {
            TaskKind::Classification => MetricKind::Accuracy,
            TaskKind::Generation => MetricKind::Rouge1,
        }
    }
}

/// Labelling rules for classification tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassificationRule {
    /// Last digit of a number even or odd.
    Parity,
    /// Leading digit of a number at least 5.
    Magnitude,
    /// Majority polarity of a three-word phrase.
    Sentiment,
    /// Word begins with a vowel.
    VowelStart,
    /// Bracket string is balanced.
    Brackets,
    /// Word written in upper or lower case.
    Case,
    /// Word has at least six letters.
    Length,
    /// String contains a digit.
    HasDigit,
    /// Number contains the digit 7.
    HasSeven,
    /// First digit of a number below its last digit.
    Order,
    /// Middle digit of a number at least 5.
    Middle,
    /// Number has a repeated digit.
    Repeated,
    /// Leading digit odd or even.
    LeadOdd,
    /// Number ends in 0 or 5.
    Round,
}

impl ClassificationRule {
    pub const ALL: [ClassificationRule; 14] = [
        Self::Parity,
        Self::Magnitude,
        Self::Sentiment,
        Self::VowelStart,
        Self::Brackets,
        Self::Case,
        Self::Length,
        Self::HasDigit,
        Self::HasSeven,
        Self::Order,
        Self::Middle,
        Self::Repeated,
        Self::LeadOdd,
        Self::Round,
    ];

    /// The seven rules of the default classification suite.
    pub const DEFAULT_SUITE: [ClassificationRule; 7] = [
        Self::Parity,
        Self::Magnitude,
        Self::Sentiment,
        Self::VowelStart,
        Self::Case,
        Self::Length,
        Self::HasDigit,
    ];

    /// Rules over numbers, used by the support-disjoint suite so
    /// that payloads overlap across tasks.
    pub const NUMBER_RULES: [ClassificationRule; 8] = [
        Self::Parity,
        Self::Magnitude,
        Self::HasSeven,
        Self::Order,
        Self::Middle,
        Self::Repeated,
        Self::LeadOdd,
        Self::Round,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parity => "parity",
            Self::Magnitude => "magnitude",
            Self::Sentiment => "sentiment",
            Self::VowelStart => "vowel_start",
            Self::Brackets => "brackets",
            Self::Case => "case",
            Self::Length => "length",
            Self::HasDigit => "has_digit",
            Self::HasSeven => "has_seven",
            Self::Order => "order",
            Self::Middle => "middle",
            Self::Repeated => "repeated",
            Self::LeadOdd => "lead_odd",
            Self::Round => "round",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Self::Parity => "Even or odd?",
            Self::Magnitude => "High or low?",
            Self::Sentiment => "Positive or negative?",
            Self::VowelStart => "Starts with a vowel?",
            Self::Brackets => "Balanced brackets?",
            Self::Case => "Upper or lower case?",
            Self::Length => "Long or short?",
            Self::HasDigit => "Contains a digit?",
            Self::HasSeven => "Contains a 7?",
            Self::Order => "Up or down?",
            Self::Middle => "Middle big or small?",
            Self::Repeated => "Repeated digit?",
            Self::LeadOdd => "First digit odd?",
            Self::Round => "Round or plain?",
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Self::Parity => &["even", "odd"],
            Self::Magnitude => &["high", "low"],
            Self::Sentiment => &["positive", "negative"],
            Self::VowelStart | Self::Brackets | Self::HasDigit | Self::HasSeven | Self::Repeated => {
                &["yes", "no"]
            }
            Self::Case => &["upper", "lower"],
            Self::Length => &["long", "short"],
            Self::Order => &["up", "down"],
            Self::Middle => &["big", "small"],
            Self::LeadOdd => &["odd", "even"],
            Self::Round => &["round", "plain"],
        }
    }

    fn is_number_rule(self) -> bool {
        Self::NUMBER_RULES.contains(&self)
    }

    /// The label this rule assigns to `data`.
    pub fn label(self, data: &str) -> Result<&'static str> {
        let labels = self.labels();
        let pick = |first: bool| if first { labels[0] } else { labels[1] };
        let bytes = data.as_bytes();
        let digits = || -> Result<Vec<u8>> {
            if bytes.is_empty() || !bytes.iter().all(u8::is_ascii_digit) {
                return Err(Error::contract(format!("`{data}` is not a number")));
            }
            Ok(bytes.iter().map(|b| b - b'0').collect())
        };
        Ok(match self {
            Self::Parity => pick(digits()?.last().copied().unwrap_or(0) % 2 == 0),
            Self::Magnitude => pick(digits()?[0] >= 5),
            Self::HasSeven => pick(digits()?.contains(&7)),
            Self::Order => {
                let d = digits()?;
                pick(d[0] < d[d.len() - 1])
            }
            Self::Middle => {
                let d = digits()?;
                pick(d[d.len() / 2] >= 5)
            }
            Self::Repeated => {
                let d = digits()?;
                let distinct: HashSet<u8> = d.iter().copied().collect();
                pick(distinct.len() < d.len())
            }
            Self::LeadOdd => pick(digits()?[0] % 2 == 1),
            Self::Round => pick(matches!(digits()?.last(), Some(0 | 5))),
            Self::Sentiment => {
                let mut score = 0i32;
                for w in data.split_whitespace() {
                    if POSITIVE_WORDS.contains(&w) {
                        score += 1;
                    } else if NEGATIVE_WORDS.contains(&w) {
                        score -= 1;
                    }
                }
                pick(score > 0)
            }
            Self::VowelStart => pick(bytes.first().is_some_and(|b| VOWELS.contains(b))),
            Self::Brackets => pick(brackets_balanced(data)),
            Self::Case => pick(bytes.iter().all(u8::is_ascii_uppercase)),
            Self::Length => pick(bytes.len() >= 6),
            Self::HasDigit => pick(bytes.iter().any(u8::is_ascii_digit)),
        })
    }

    /// Draws a data string intended to receive `target` (index into
    /// `labels()`); callers confirm with [`ClassificationRule::label`].
    fn sample_data(self, target: usize, rng: &mut ChaCha8Rng) -> String {
        let want_first = target == 0;
        match self {
            _ if self.is_number_rule() => format!("{}", rng.gen_range(100..10_000)),
            Self::Sentiment => {
                // Two words of the target polarity plus one of either.
                let (major, minor) = if want_first {
                    (&POSITIVE_WORDS, &NEGATIVE_WORDS)
                } else {
                    (&NEGATIVE_WORDS, &POSITIVE_WORDS)
                };
                let mut words = vec![
                    *major.choose(rng).expect("nonempty"),
                    *major.choose(rng).expect("nonempty"),
                    if rng.gen_bool(0.5) {
                        *major.choose(rng).expect("nonempty")
                    } else {
                        *minor.choose(rng).expect("nonempty")
                    },
                ];
                words.shuffle(rng);
                words.join(" ")
            }
            Self::VowelStart => {
                let len = rng.gen_range(3..=6);
                let mut w = pseudo_word(len, rng).into_bytes();
                w[0] = if want_first {
                    *VOWELS.choose(rng).expect("nonempty")
                } else {
                    *CONSONANTS.choose(rng).expect("nonempty")
                };
                String::from_utf8(w).expect("ascii")
            }
            Self::Brackets => {
                let pairs = rng.gen_range(2..=7);
                if want_first {
                    random_dyck(pairs, rng)
                } else {
                    // Same length; a random bracket string is rarely balanced
                    // and the caller rejects the ones that are.
                    (0..2 * pairs)
                        .map(|_| if rng.gen_bool(0.5) { '(' } else { ')' })
                        .collect()
                }
            }
            Self::Case => {
                let len = rng.gen_range(3..=6);
                let w = pseudo_word(len, rng);
                if want_first {
                    w.to_ascii_uppercase()
                } else {
                    w
                }
            }
            Self::Length => {
                let len = if want_first {
                    rng.gen_range(6..=9)
                } else {
                    rng.gen_range(2..=5)
                };
                pseudo_word(len, rng)
            }
            Self::HasDigit => {
                let len = rng.gen_range(3..=6);
                let mut w = pseudo_word(len, rng).into_bytes();
                if want_first {
                    let pos = rng.gen_range(0..len);
                    w[pos] = b'0' + rng.gen_range(0..10u8);
                }
                String::from_utf8(w).expect("ascii")
            }
            _ => unreachable!("number rules handled above"),
        }
    }
}

impl fmt::Display for ClassificationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassificationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownRule(s.to_string()))
    }
}

/// String transformations for generation tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transformation {
    /// Reverse the whole payload character by character.
    Reverse,
    /// Sort the letters of each word.
    Sort,
    /// Repeat the payload, separated by a space.
    Duplicate,
    /// Upper-case every vowel.
    UppercaseVowels,
}

impl Transformation {
    pub const ALL: [Transformation; 4] = [
        Self::Reverse,
        Self::Sort,
        Self::Duplicate,
        Self::UppercaseVowels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Reverse => "reverse",
            Self::Sort => "sort",
            Self::Duplicate => "duplicate",
            Self::UppercaseVowels => "uppercase_vowels",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Self::Reverse => "Reverse:",
            Self::Sort => "Sort letters:",
            Self::Duplicate => "Repeat twice:",
            Self::UppercaseVowels => "Capital vowels:",
        }
    }

    pub fn apply(self, payload: &str) -> String {
        match self {
            Self::Reverse => payload.chars().rev().collect(),
            Self::Sort => payload
                .split(' ')
                .map(|w| {
                    let mut b = w.as_bytes().to_vec();
                    b.sort_unstable();
                    String::from_utf8(b).expect("ascii")
                })
                .collect::<Vec<_>>()
                .join(" "),
            Self::Duplicate => format!("{payload} {payload}"),
            Self::UppercaseVowels => payload
                .chars()
                .map(|c| if "aeiou".contains(c) { c.to_ascii_uppercase() } else { c })
                .collect(),
        }
    }
}

impl fmt::Display for Transformation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transformation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownRule(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            validation: 100,
            test: 100,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub answer: String,
}

/// Disjoint index sets into [`TaskDataset::examples`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Everything needed to regenerate a task bit for bit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskFamily {
    pub kind: TaskKind,
    /// Rule name (classification) or transformation name (generation).
    pub rule: String,
    pub sizes: SplitSizes,
    /// Prefix byte shared by every prompt, for support-disjoint suites.
    pub sentinel: Option<u8>,
    pub seed: u64,
}

impl TaskFamily {
    pub fn generate(&self) -> Result<TaskDataset> {
        match self.kind {
            TaskKind::Classification => make_classification_task(self),
            TaskKind::Generation => make_generation_task(self),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: String,
    pub kind: TaskKind,
    pub examples: Vec<Example>,
    pub splits: Splits,
    pub support_tag: Option<u8>,
}

impl TaskDataset {
    pub fn metric(&self) -> MetricKind {
        self.kind.metric()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        let idx = match split {
            Split::Train => &self.splits.train,
            Split::Validation => &self.splits.validation,
            Split::Test => &self.splits.test,
        };
        idx.iter().map(move |&i| &self.examples[i])
    }

    pub fn prompts(&self, split: Split) -> Vec<&str> {
        self.split(split).map(|e| e.prompt.as_str()).collect()
    }

    /// Unlabelled prompts for coefficient optimization: validation prompts
    /// first, then training prompts, truncated to `size`.
    pub fn merging_prompts(&self, size: usize) -> Vec<&str> {
        self.split(Split::Validation)
            .chain(self.split(Split::Train))
            .take(size)
            .map(|e| e.prompt.as_str())
            .collect()
    }

    /// The split an example index belongs to.
    pub fn split_of(&self, index: usize) -> Option<Split> {
        if self.splits.train.contains(&index) {
            Some(Split::Train)
        } else if self.splits.validation.contains(&index) {
            Some(Split::Validation)
        } else if self.splits.test.contains(&index) {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// The data part of a prompt: between the instruction line and the cue,
    /// with any sentinel removed.
    pub fn payload(prompt: &str) -> &str {
        let body = prompt
            .split_once('\n')
            .map(|(_, rest)| rest)
            .unwrap_or(prompt);
        body.strip_suffix(&format!("\n{ANSWER_CUE}")).unwrap_or(body)
    }

    /// Writes one JSON object per example, in example order.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, ex) in self.examples.iter().enumerate() {
            let split = self
                .split_of(i)
                .ok_or_else(|| Error::contract("example outside every split"))?;
            let record = JsonlRecord {
                task: self.task_id.clone(),
                split: split.name().to_string(),
                prompt: ex.prompt.clone(),
                answer: ex.answer.clone(),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`TaskDataset::write_jsonl`]. The task kind
    /// is recovered from the task id; the support tag from a shared sentinel
    /// prefix.
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut task_id: Option<String> = None;
        let mut examples = Vec::new();
        let mut splits = Splits::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)?;
            match &task_id {
                None => task_id = Some(rec.task.clone()),
                Some(t) if *t != rec.task => {
                    return Err(Error::Format(format!(
                        "{} mixes tasks `{t}` and `{}`",
                        path.display(),
                        rec.task
                    )))
                }
                _ => {}
            }
            let idx = examples.len();
            match rec.split.parse::<Split>()? {
                Split::Train => splits.train.push(idx),
                Split::Validation => splits.validation.push(idx),
                Split::Test => splits.test.push(idx),
            }
            examples.push(Example {
                prompt: rec.prompt,
                answer: rec.answer,
            });
        }
        let task_id = task_id.ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
        let kind = kind_from_task_id(&task_id);
        let first = examples[0].prompt.as_bytes()[0];
        let support_tag = (SENTINELS.contains(&first)
            && examples.iter().all(|e| e.prompt.as_bytes()[0] == first))
        .then_some(first);
        Ok(Self {
            task_id,
            kind,
            examples,
            splits,
            support_tag,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    task: String,
    split: String,
    prompt: String,
    answer: String,
}

fn kind_from_task_id(task_id: &str) -> TaskKind {
    let base = task_id.rsplit('-').next().unwrap_or(task_id);
    if base.parse::<Transformation>().is_ok() {
        TaskKind::Generation
    } else {
        TaskKind::Classification
    }
}

pub fn format_prompt(sentinel: Option<u8>, instruction: &str, data: &str) -> String {
    let mut p = String::new();
    if let Some(s) = sentinel {
        p.push(s as char);
    }
    p.push_str(instruction);
    p.push('\n');
    p.push_str(data);
    p.push('\n');
    p.push_str(ANSWER_CUE);
    p
}

/// Stack-based balance check for strings of `(` and `)`.
pub fn brackets_balanced(s: &str) -> bool {
    let mut depth = 0i64;
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

fn pseudo_word(len: usize, rng: &mut ChaCha8Rng) -> String {
    (0..len)
        .map(|i| {
            let pool = if i % 2 == 0 { CONSONANTS } else { VOWELS };
            let pool = if rng.gen_bool(0.2) { VOWELS } else { pool };
            *pool.choose(rng).expect("nonempty") as char
        })
        .collect()
}

/// Uniform-ish random balanced string with `pairs` bracket pairs.
fn random_dyck(pairs: usize, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::with_capacity(2 * pairs);
    let (mut open, mut close) = (pairs, pairs);
    while open + close > 0 {
        let can_open = open > 0;
        let can_close = close > open;
        let choose_open = match (can_open, can_close) {
            (true, true) => rng.gen_bool(open as f64 / (open + close) as f64),
            (true, false) => true,
            _ => false,
        };
        if choose_open {
            out.push('(');
            open -= 1;
        } else {
            out.push(')');
            close -= 1;
        }
    }
    out
}

fn task_id(family: &TaskFamily) -> String {
    match family.sentinel {
        Some(s) => {
            let idx = SENTINELS.iter().position(|&x| x == s).unwrap_or(0);
            format!("disjoint{idx}-{}", family.rule)
        }
        None => family.rule.clone(),
    }
}

fn assign_splits(n: usize, sizes: &SplitSizes, rng: &mut ChaCha8Rng) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut train = order[..sizes.train].to_vec();
    let mut validation = order[sizes.train..sizes.train + sizes.validation].to_vec();
    let mut test = order[sizes.train + sizes.validation..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Splits {
        train,
        validation,
        test,
    }
}

const MAX_DRAWS_PER_EXAMPLE: usize = 10_000;

/// Labelled dataset for a classification rule. Labels alternate so the label
/// distribution is balanced within one example; prompts are unique.
pub fn make_classification_task(family: &TaskFamily) -> Result<TaskDataset> {
    let rule: ClassificationRule = family.rule.parse()?;
    let mut rng = rng::substream(family.seed, &format!("classification/{}", family.rule));
    let total = family.sizes.total();
    let labels = rule.labels();
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    for i in 0..total {
        let target = i % labels.len();
        let mut found = None;
        for _ in 0..MAX_DRAWS_PER_EXAMPLE {
            let data = rule.sample_data(target, &mut rng);
            if rule.label(&data)? != labels[target] {
                continue;
            }
            let prompt = format_prompt(family.sentinel, rule.instruction(), &data);
            if seen.insert(prompt.clone()) {
                found = Some(Example {
                    prompt,
                    answer: labels[target].to_string(),
                });
                break;
            }
        }
        examples.push(found.ok_or_else(|| {
            Error::contract(format!(
                "rule `{rule}` cannot supply {total} distinct prompts for label `{}`",
                labels[target]
            ))
        })?);
    }
    let splits = assign_splits(total, &family.sizes, &mut rng);
    Ok(TaskDataset {
        task_id: task_id(family),
        kind: TaskKind::Classification,
        examples,
        splits,
        support_tag: family.sentinel,
    })
}

/// Dataset whose answers are a fixed transformation of a short payload of
/// one or two lowercase words.
pub fn make_generation_task(family: &TaskFamily) -> Result<TaskDataset> {
    let transform: Transformation = family.rule.parse()?;
    let mut rng = rng::substream(family.seed, &format!("generation/{}", family.rule));
    let total = family.sizes.total();
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    while examples.len() < total {
        if seen.len() > total * MAX_DRAWS_PER_EXAMPLE {
            return Err(Error::contract("generation payload space exhausted"));
        }
        let words = rng.gen_range(1..=2);
        let payload = (0..words)
            .map(|_| {
                let len = rng.gen_range(2..=4);
                pseudo_word(len, &mut rng)
            })
            .collect::<Vec<_>>()
            .join(" ");
        let prompt = format_prompt(family.sentinel, transform.instruction(), &payload);
        if seen.insert(prompt.clone()) {
            examples.push(Example {
                prompt,
                answer: transform.apply(&payload),
            });
        }
    }
    let splits = assign_splits(total, &family.sizes, &mut rng);
    Ok(TaskDataset {
        task_id: task_id(family),
        kind: TaskKind::Generation,
        examples,
        splits,
        support_tag: family.sentinel,
    })
}

/// `n_tasks` classification tasks over the same three- and four-digit number payloads,
/// made support-disjoint by a sentinel byte unique to each task.
pub fn make_disjoint_suite(n_tasks: usize, seed: u64) -> Result<Vec<TaskDataset>> {
    make_disjoint_suite_sized(n_tasks, SplitSizes::default(), seed)
}

pub fn make_disjoint_suite_sized(
    n_tasks: usize,
    sizes: SplitSizes,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    if n_tasks == 0 || n_tasks > SENTINELS.len() {
        return Err(Error::contract(format!(
            "disjoint suites hold 1..={} tasks, asked for {n_tasks}",
            SENTINELS.len()
        )));
    }
    (0..n_tasks)
        .map(|i| {
            TaskFamily {
                kind: TaskKind::Classification,
                rule: ClassificationRule::NUMBER_RULES[i].name().to_string(),
                sizes,
                sentinel: Some(SENTINELS[i]),
                seed: rng::derive_seed(seed, &format!("disjoint/{i}")),
            }
            .generate()
        })
        .collect()
}

/// The seven default classification tasks.
pub fn default_classification_suite(sizes: SplitSizes, seed: u64) -> Result<Vec<TaskDataset>> {
    classification_tasks(&ClassificationRule::DEFAULT_SUITE, sizes, seed)
}

/// Every classification rule outside the default suite, used as auxiliary
/// pretraining data for a base model.
pub fn auxiliary_classification_suite(sizes: SplitSizes, seed: u64) -> Result<Vec<TaskDataset>> {
    let rules: Vec<ClassificationRule> = ClassificationRule::ALL
        .into_iter()
        .filter(|r| !ClassificationRule::DEFAULT_SUITE.contains(r))
        .collect();
    classification_tasks(&rules, sizes, seed)
}

fn classification_tasks(
    rules: &[ClassificationRule],
    sizes: SplitSizes,
    seed: u64,
) -> Result<Vec<TaskDataset>> {
    rules
        .iter()
        .map(|rule| {
            TaskFamily {
                kind: TaskKind::Classification,
                rule: rule.name().to_string(),
                sizes,
                sentinel: None,
                seed: rng::derive_seed(seed, rule.name()),
            }
            .generate()
        })
        .collect()
}

/// The four default generation tasks.
pub fn default_generation_suite(sizes: SplitSizes, seed: u64) -> Result<Vec<TaskDataset>> {
    Transformation::ALL
        .iter()
        .map(|t| {
            TaskFamily {
                kind: TaskKind::Generation,
                rule: t.name().to_string(),
                sizes,
                sentinel: None,
                seed: rng::derive_seed(seed, t.name()),
            }
            .generate()
        })
        .collect()
}
