//! Synthetic context-free languages: seeded sampling, an exact Earley
//! recognizer, and corruption of grammatical sentences into negatives.
//!
//! Grammars are written one rule per line, `A -> x y | z @2`, where `@w`
//! gives an alternative a sampling weight (default 1). A symbol is a
//! nonterminal iff it appears on some left-hand side. Empty alternatives
//! are not allowed.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::rng::{self, RngExt, SliceRandom};

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("grammar has no rules")]
    Empty,
    #[error("sampling failed to produce a sentence within {0} attempts")]
    SamplingExhausted(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    T(String),
    N(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    names: Vec<String>,
    rules: Vec<Rule>,
    by_lhs: Vec<Vec<usize>>,
    start: usize,
}

impl Grammar {
    /// Parses the rule format described in the module docs. The first
    /// left-hand side is the start symbol.
    pub fn parse(text: &str) -> Result<Self, GrammarError> {
        let mut raw: Vec<(usize, String, Vec<(Vec<String>, f64)>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, rhs) = line.split_once("->").ok_or_else(|| GrammarError::Parse {
                line: line_no,
                msg: "missing '->'".into(),
            })?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.contains(char::is_whitespace) {
                return Err(GrammarError::Parse {
                    line: line_no,
                    msg: format!("bad left-hand side {lhs:?}"),
                });
            }
            let mut alts = Vec::new();
            for alt in rhs.split('|') {
                let mut syms: Vec<String> = alt.split_whitespace().map(str::to_string).collect();
                let mut weight = 1.0;
                if let Some(w) = syms.last().and_then(|s| s.strip_prefix('@')) {
                    weight = w.parse().map_err(|_| GrammarError::Parse {
                        line: line_no,
                        msg: format!("bad weight {w:?}"),
                    })?;
                    syms.pop();
                }
                if syms.is_empty() {
                    return Err(GrammarError::Parse {
                        line: line_no,
                        msg: "empty alternative".into(),
                    });
                }
                if !(weight > 0.0) {
                    return Err(GrammarError::Parse {
                        line: line_no,
                        msg: "weights must be positive".into(),
                    });
                }
                alts.push((syms, weight));
            }
            raw.push((line_no, lhs.to_string(), alts));
        }
        if raw.is_empty() {
            return Err(GrammarError::Empty);
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut names = Vec::new();
        for (_, lhs, _) in &raw {
            if !index.contains_key(lhs) {
                index.insert(lhs.clone(), names.len());
                names.push(lhs.clone());
            }
        }
        let mut rules = Vec::new();
        let mut by_lhs = vec![Vec::new(); names.len()];
        for (_, lhs, alts) in raw {
            let l = index[&lhs];
            for (syms, weight) in alts {
                let rhs = syms
                    .into_iter()
                    .map(|s| match index.get(&s) {
                        Some(&n) => Symbol::N(n),
                        None => Symbol::T(s),
                    })
                    .collect();
                by_lhs[l].push(rules.len());
                rules.push(Rule { lhs: l, rhs, weight });
            }
        }
        Ok(Self {
            names,
            rules,
            by_lhs,
            start: 0,
        })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn name(&self, n: usize) -> &str {
        &self.names[n]
    }

    pub fn alternatives(&self, n: usize) -> &[usize] {
        &self.by_lhs[n]
    }

    /// All terminal words, sorted.
    pub fn terminals(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .rules
            .iter()
            .flat_map(|r| r.rhs.iter())
            .filter_map(|s| match s {
                Symbol::T(t) => Some(t),
                Symbol::N(_) => None,
            })
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Sentence-initial words the grammar can produce, sorted.
    pub fn initial_words(&self) -> Vec<String> {
        let mut seen = vec![false; self.names.len()];
        let mut out = BTreeSet::new();
        let mut stack = vec![self.start];
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            for &r in &self.by_lhs[n] {
                match &self.rules[r].rhs[0] {
                    Symbol::T(t) => {
                        out.insert(t.clone());
                    }
                    Symbol::N(m) => stack.push(*m),
                }
            }
        }
        out.into_iter().collect()
    }

    fn expand(&self, sym: usize, depth: usize, max_depth: usize, rng: &mut rng::Rng, out: &mut Vec<String>) -> bool {
        if depth > max_depth {
            return false;
        }
        let alts = &self.by_lhs[sym];
        let total: f64 = alts.iter().map(|&r| self.rules[r].weight).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = *alts.last().expect("every nonterminal has a rule");
        for &r in alts {
            u -= self.rules[r].weight;
            if u < 0.0 {
                pick = r;
                break;
            }
        }
        for s in &self.rules[pick].rhs {
            match s {
                Symbol::T(t) => out.push(t.clone()),
                Symbol::N(n) => {
                    if !self.expand(*n, depth + 1, max_depth, rng, out) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Draws one sentence of at most `max_words` words by weighted
    /// top-down expansion, rejecting over-long or over-deep derivations.
    pub fn sample(&self, rng: &mut rng::Rng, max_words: usize) -> Result<Vec<String>, GrammarError> {
        const ATTEMPTS: usize = 1000;
        for _ in 0..ATTEMPTS {
            let mut out = Vec::new();
            if self.expand(self.start, 0, 24, rng, &mut out) && out.len() <= max_words {
                return Ok(out);
            }
        }
        Err(GrammarError::SamplingExhausted(ATTEMPTS))
    }

    /// `n` sentences as space-joined strings, deterministic in `seed`.
    pub fn sample_corpus(&self, n: usize, max_words: usize, seed: u64) -> Result<Vec<String>, GrammarError> {
        let mut rng = rng::seeded(seed);
        (0..n).map(|_| self.sample(&mut rng, max_words).map(|w| w.join(" "))).collect()
    }

    /// Exact membership test (Earley).
    pub fn recognize<S: AsRef<str>>(&self, words: &[S]) -> bool {
        let n = words.len();
        if n == 0 {
            return false;
        }
        type Item = (usize, usize, usize); // rule, dot, origin
        let mut chart: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
        let mut seen: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
        let push = |chart: &mut Vec<Vec<Item>>, seen: &mut Vec<HashSet<Item>>, i: usize, it: Item| {
            if seen[i].insert(it) {
                chart[i].push(it);
            }
        };
        for &r in &self.by_lhs[self.start] {
            push(&mut chart, &mut seen, 0, (r, 0, 0));
        }
        for i in 0..=n {
            let mut k = 0;
            while k < chart[i].len() {
                let (r, dot, origin) = chart[i][k];
                k += 1;
                let rule = &self.rules[r];
                match rule.rhs.get(dot) {
                    Some(Symbol::N(b)) => {
                        for &r2 in &self.by_lhs[*b] {
                            push(&mut chart, &mut seen, i, (r2, 0, i));
                        }
                    }
                    Some(Symbol::T(t)) => {
                        if i < n && words[i].as_ref() == t {
                            push(&mut chart, &mut seen, i + 1, (r, dot + 1, origin));
                        }
                    }
                    None => {
                        // no empty rules, so origin < i and that set is final
                        let waiting: Vec<Item> = chart[origin]
                            .iter()
                            .copied()
                            .filter(|&(r2, d2, _)| self.rules[r2].rhs.get(d2) == Some(&Symbol::N(rule.lhs)))
                            .collect();
                        for (r2, d2, o2) in waiting {
                            push(&mut chart, &mut seen, i, (r2, d2 + 1, o2));
                        }
                    }
                }
            }
        }
        chart[n]
            .iter()
            .any(|&(r, dot, origin)| origin == 0 && self.rules[r].lhs == self.start && dot == self.rules[r].rhs.len())
    }

    pub fn recognize_str(&self, sentence: &str) -> bool {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        self.recognize(&words)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    SwapAdjacent,
    Delete,
    Insert,
    Substitute,
    Truncate,
}

pub const CORRUPTIONS: [Corruption; 5] = [
    Corruption::SwapAdjacent,
    Corruption::Delete,
    Corruption::Insert,
    Corruption::Substitute,
    Corruption::Truncate,
];

fn apply_corruption(kind: Corruption, words: &[String], lexicon: &[String], rng: &mut rng::Rng) -> Option<Vec<String>> {
    let n = words.len();
    let mut w = words.to_vec();
    match kind {
        Corruption::SwapAdjacent => {
            if n < 2 {
                return None;
            }
            let i = rng.gen_range(0..n - 1);
            w.swap(i, i + 1);
        }
        Corruption::Delete => {
            if n < 2 {
                return None;
            }
            w.remove(rng.gen_range(0..n));
        }
        Corruption::Insert => {
            let tok = lexicon.choose(rng)?.clone();
            w.insert(rng.gen_range(0..=n), tok);
        }
        Corruption::Substitute => {
            let i = rng.gen_range(0..n);
            w[i] = lexicon.choose(rng)?.clone();
        }
        Corruption::Truncate => {
            if n < 2 {
                return None;
            }
            w.truncate(rng.gen_range(1..n));
        }
    }
    Some(w)
}

/// Applies random single-edit corruptions until the result falls outside
/// the grammar; `None` if twenty attempts all stayed grammatical.
pub fn corrupt(grammar: &Grammar, words: &[String], lexicon: &[String], rng: &mut rng::Rng) -> Option<Vec<String>> {
    for _ in 0..20 {
        let kind = *CORRUPTIONS.choose(rng).expect("non-empty");
        if let Some(w) = apply_corruption(kind, words, lexicon, rng) {
            if !grammar.recognize(&w) {
                return Some(w);
            }
        }
    }
    None
}

/// Balanced acceptability data: `n/2` fresh grammatical sentences labeled
/// 1 and `n - n/2` verified-ungrammatical corruptions labeled 0, shuffled.
pub fn acceptability_set(grammar: &Grammar, n: usize, max_words: usize, seed: u64) -> Result<Vec<(String, u8)>, GrammarError> {
    let mut rng = rng::seeded(seed);
    let lexicon = grammar.terminals();
    let mut out = Vec::with_capacity(n);
    let n_pos = n / 2;
    while out.len() < n_pos {
        out.push((grammar.sample(&mut rng, max_words)?.join(" "), 1));
    }
    while out.len() < n {
        let s = grammar.sample(&mut rng, max_words)?;
        if let Some(bad) = corrupt(grammar, &s, &lexicon, &mut rng) {
            out.push((bad.join(" "), 0));
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// English-like toy language with number agreement, relative clauses and
/// prepositional attachment.
pub const ENGLISH_LIKE: &str = "\
S -> NPS VPS | NPP VPP
NPS -> DS NS @3 | DS ADJ NS @2 | NAME @1.5 | DS NS PP @0.5 | DS NS that VPS @0.5
NPP -> DP NP @3 | DP ADJ NP @2 | DP NP PP @0.5 | DP NP that VPP @0.5
OBJ -> NPS | NPP
VPS -> VIS @2 | VIS ADV | VTS OBJ @3 | VTS OBJ ADV @0.5
VPP -> VIP @2 | VIP ADV | VTP OBJ @3 | VTP OBJ ADV @0.5
PP -> P NPS | P NPP
DS -> the @3 | a @2 | this | every | each
DP -> the @3 | these | those | some | many
NS -> dog | cat | bird | child | teacher | farmer | king | queen | doctor | student | horse | baker | pilot | poet | sailor
NP -> dogs | cats | birds | children | teachers | farmers | kings | queens | doctors | students | horses | bakers | pilots | poets | sailors
ADJ -> small | old | happy | quiet | brave | clever | young | tired | kind | proud
NAME -> alice | bob | carol | dave | erin | frank
VIS -> sleeps | runs | laughs | sings | waits | smiles | falls | dances
VIP -> sleep | run | laugh | sing | wait | smile | fall | dance
VTS -> sees | likes | helps | follows | finds | watches | calls | knows
VTP -> see | like | help | follow | find | watch | call | know
ADV -> quickly | slowly | often | today | again | quietly
P -> near | with | behind | under | beside | after
";

/// A second language whose terminals are disjoint from [`ENGLISH_LIKE`].
pub const NEW_DOMAIN: &str = "\
S -> QS RS | QP RP
QS -> DN MS @2 | DN MOD MS
QP -> DNP MP @2 | DNP MOD MP
RS -> TS OBJ @2 | IS
RP -> TP OBJ @2 | IP
OBJ -> DN MS | DNP MP | DN MOD MS | DNP MOD MP
DN -> one | any
DNP -> several | both | all
MS -> qubit | kernel | tensor | compiler | sensor | router | server | cluster
MP -> qubits | kernels | tensors | compilers | sensors | routers | servers | clusters
MOD -> quantum | neural | sparse | remote | parallel | robust
TS -> computes | encrypts | schedules | updates | compresses | queries
TP -> compute | encrypt | schedule | update | compress | query
IS -> converges | crashes | scales | reboots
IP -> converge | crash | scale | reboot
";

pub fn english_like() -> Grammar {
    Grammar::parse(ENGLISH_LIKE).expect("built-in grammar parses")
}

pub fn new_domain() -> Grammar {
    Grammar::parse(NEW_DOMAIN).expect("built-in grammar parses")
}
