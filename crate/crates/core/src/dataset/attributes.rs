//! Attribute index parsing, attribute predicates and marginal domain sets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};

/// Per-image boolean attributes, in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeIndex {
    pub attribute_names: Vec<String>,
    pub entries: Vec<(String, Vec<bool>)>,
}

impl AttributeIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn attribute_position(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|a| a == name)
    }

    /// Renders the index in the attribute-list text format.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{}\n{}\n",
            self.entries.len(),
            self.attribute_names.join(" ")
        );
        for (id, attrs) in &self.entries {
            s.push_str(id);
            for &a in attrs {
                s.push_str(if a { "  1" } else { " -1" });
            }
            s.push('\n');
        }
        s
    }
}

/// Parses the attribute-list format: a row count, a line of attribute
/// names, then `<image-id> <±1> … <±1>` rows.
pub fn parse_attribute_index(text: &str) -> Result<AttributeIndex> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, count_line) = lines.next().ok_or(Error::Format {
        line: 1,
        msg: "missing row count".into(),
    })?;
    let declared: usize = count_line.trim().parse().map_err(|_| Error::Format {
        line: ln,
        msg: format!("row count {:?} is not an integer", count_line.trim()),
    })?;
    let attribute_names: Vec<String> = match lines.next() {
        Some((_, l)) => l.split_whitespace().map(str::to_string).collect(),
        None if declared == 0 => Vec::new(),
        None => {
            return Err(Error::Format {
                line: 2,
                msg: "missing attribute-name header".into(),
            })
        }
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(declared);
    let mut last_line = 2;
    for (ln, line) in lines {
        last_line = ln;
        let mut toks = line.split_whitespace();
        let Some(id) = toks.next() else { continue };
        let mut attrs = Vec::with_capacity(attribute_names.len());
        for tok in toks {
            attrs.push(match tok {
                "1" => true,
                "-1" => false,
                other => {
                    return Err(Error::Format {
                        line: ln,
                        msg: format!("unknown attribute token {other:?}"),
                    })
                }
            });
        }
        if attrs.len() != attribute_names.len() {
            return Err(Error::Format {
                line: ln,
                msg: format!(
                    "expected {} attribute values, found {}",
                    attribute_names.len(),
                    attrs.len()
                ),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::Format {
                line: ln,
                msg: format!("duplicate image id {id}"),
            });
        }
        entries.push((id.to_string(), attrs));
    }
    if entries.len() != declared {
        return Err(Error::Format {
            line: if entries.len() > declared {
                last_line
            } else {
                1
            },
            msg: format!(
                "header declares {declared} rows but file has {}",
                entries.len()
            ),
        });
    }
    Ok(AttributeIndex {
        attribute_names,
        entries,
    })
}

pub fn load_attribute_index(path: impl AsRef<Path>) -> Result<AttributeIndex> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_attribute_index(&text)
}

/// Boolean expression over named attributes: `!`, `&`, `|`, parentheses,
/// `true`, `false` and attribute names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Predicate {
    Const(bool),
    Attr(String),
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
}

impl Predicate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = PredParser {
            src: text.as_bytes(),
            pos: 0,
        };
        let e = p.or()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(Error::Parse {
                pos: p.pos,
                msg: format!("unexpected trailing input in predicate {text:?}"),
            });
        }
        Ok(e)
    }

    pub fn attributes(&self) -> Vec<&str> {
        match self {
            Self::Const(_) => vec![],
            Self::Attr(a) => vec![a.as_str()],
            Self::Not(e) => e.attributes(),
            Self::And(a, b) | Self::Or(a, b) => {
                let mut v = a.attributes();
                v.extend(b.attributes());
                v
            }
        }
    }

    /// Resolves names to positions for fast evaluation.
    pub fn compile(&self, names: &[String]) -> Result<CompiledPredicate> {
        let pos: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        fn go(p: &Predicate, pos: &HashMap<&str, usize>) -> Result<CompiledPredicate> {
            Ok(match p {
                Predicate::Const(b) => CompiledPredicate::Const(*b),
                Predicate::Attr(a) => CompiledPredicate::Attr(
                    *pos.get(a.as_str())
                        .ok_or_else(|| config(format!("unknown attribute {a:?} in predicate")))?,
                ),
                Predicate::Not(e) => CompiledPredicate::Not(Box::new(go(e, pos)?)),
                Predicate::And(a, b) => {
                    CompiledPredicate::And(Box::new(go(a, pos)?), Box::new(go(b, pos)?))
                }
                Predicate::Or(a, b) => {
                    CompiledPredicate::Or(Box::new(go(a, pos)?), Box::new(go(b, pos)?))
                }
            })
        }
        go(self, &pos)
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Const(b) => write!(f, "{b}"),
            Self::Attr(a) => write!(f, "{a}"),
            Self::Not(e) => write!(f, "!{e}"),
            Self::And(a, b) => write!(f, "({a} & {b})"),
            Self::Or(a, b) => write!(f, "({a} | {b})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompiledPredicate {
    Const(bool),
    Attr(usize),
    Not(Box<CompiledPredicate>),
    And(Box<CompiledPredicate>, Box<CompiledPredicate>),
    Or(Box<CompiledPredicate>, Box<CompiledPredicate>),
}

impl CompiledPredicate {
    pub fn eval(&self, attrs: &[bool]) -> bool {
        match self {
            Self::Const(b) => *b,
            Self::Attr(i) => attrs[*i],
            Self::Not(e) => !e.eval(attrs),
            Self::And(a, b) => a.eval(attrs) && b.eval(attrs),
            Self::Or(a, b) => a.eval(attrs) || b.eval(attrs),
        }
    }
}

struct PredParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl PredParser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Predicate> {
        let mut e = self.and()?;
        while self.eat(b'|') {
            e = Predicate::Or(Box::new(e), Box::new(self.and()?));
        }
        Ok(e)
    }

    fn and(&mut self) -> Result<Predicate> {
        let mut e = self.unary()?;
        while self.eat(b'&') {
            e = Predicate::And(Box::new(e), Box::new(self.unary()?));
        }
        Ok(e)
    }

    fn unary(&mut self) -> Result<Predicate> {
        if self.eat(b'!') {
            return Ok(Predicate::Not(Box::new(self.unary()?)));
        }
        if self.eat(b'(') {
            let e = self.or()?;
            if !self.eat(b')') {
                return Err(Error::Parse {
                    pos: self.pos,
                    msg: "expected ')'".into(),
                });
            }
            return Ok(e);
        }
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                pos: start,
                msg: "expected attribute name".into(),
            });
        }
        let word = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        Ok(match word {
            "true" => Predicate::Const(true),
            "false" => Predicate::Const(false),
            w => Predicate::Attr(w.to_string()),
        })
    }
}

/// Membership rules for the `N` marginal domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_names: Vec<String>,
    pub predicates: Vec<String>,
    /// Images satisfying this are dropped from every domain.
    pub exclusion: String,
    /// Zero-based domain pairs; each domain appears exactly once.
    pub pairing: Vec<(usize, usize)>,
}

impl DomainSpec {
    /// Glasses and smiling marginals with no smiling-and-glasses faces.
    ///
    /// In this order `G_2(E_1(G_3(E_4(x))))` takes a not-smiling face
    /// without glasses to smiling with glasses.
    pub fn experiment_one() -> Self {
        Self {
            domain_names: vec![
                "no_glasses".into(),
                "glasses".into(),
                "smiling".into(),
                "not_smiling".into(),
            ],
            predicates: vec![
                "!Eyeglasses".into(),
                "Eyeglasses".into(),
                "Smiling".into(),
                "!Smiling".into(),
            ],
            exclusion: "Smiling & Eyeglasses".into(),
            pairing: vec![(0, 1), (2, 3)],
        }
    }

    /// Hair colour and smiling marginals with no smiling blond or brown-haired faces.
    pub fn experiment_two() -> Self {
        Self {
            domain_names: vec![
                "blonde".into(),
                "brunette".into(),
                "smiling".into(),
                "not_smiling".into(),
            ],
            predicates: vec![
                "Blond_Hair".into(),
                "Brown_Hair".into(),
                "Smiling".into(),
                "!Smiling".into(),
            ],
            exclusion: "Smiling & (Blond_Hair | Brown_Hair)".into(),
            pairing: vec![(0, 1), (2, 3)],
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.domain_names.len();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(config(format!(
                "domain count must be even and nonzero, got {n}"
            )));
        }
        if self.predicates.len() != n {
            return Err(config("one predicate per domain is required"));
        }
        let mut seen = vec![false; n];
        for &(a, b) in &self.pairing {
            for d in [a, b] {
                if d >= n || seen[d] {
                    return Err(config(format!(
                        "pairing must cover each of the {n} domains exactly once"
                    )));
                }
                seen[d] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(config(format!(
                "pairing must cover each of the {n} domains exactly once"
            )));
        }
        let mut names = HashSet::new();
        for name in &self.domain_names {
            if !names.insert(name.to_lowercase()) {
                return Err(config(format!("duplicate domain name {name:?}")));
            }
        }
        Ok(())
    }
}

/// Image ids per domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDatasets {
    pub domain_names: Vec<String>,
    pub members: Vec<Vec<String>>,
}

impl DomainDatasets {
    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Splits each domain into (train, validation) ids.
    pub fn split(&self) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for m in &self.members {
            let (v, t): (Vec<String>, Vec<String>) =
                m.iter().cloned().partition(|id| is_validation(id));
            train.push(t);
            val.push(v);
        }
        (train, val)
    }

    /// SHA-256 over the spec and the membership lists.
    pub fn content_hash(&self, spec: &DomainSpec) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        for (name, members) in self.domain_names.iter().zip(&self.members) {
            h.update(name.as_bytes());
            h.update([0]);
            for id in members {
                h.update(id.as_bytes());
                h.update(*b"\n");
            }
        }
        hex::encode(h.finalize())
    }
}

/// Percentage of each domain held out for evaluation.
pub const VALIDATION_PERCENT: u64 = 5;

/// Deterministic evaluation hold-out by hashing the image id.
pub fn is_validation(image_id: &str) -> bool {
    let d = Sha256::digest(image_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b) % 100 < VALIDATION_PERCENT
}

/// Filters the index into one set per domain: predicate `d` and not the exclusion.
pub fn build_marginal_sets(index: &AttributeIndex, spec: &DomainSpec) -> Result<DomainDatasets> {
    spec.validate()?;
    let exclusion = Predicate::parse(&spec.exclusion)?.compile(&index.attribute_names)?;
    let preds = spec
        .predicates
        .iter()
        .map(|p| Predicate::parse(p)?.compile(&index.attribute_names))
        .collect::<Result<Vec<_>>>()?;
    let mut members = vec![Vec::new(); spec.num_domains()];
    for (id, attrs) in &index.entries {
        if exclusion.eval(attrs) {
            continue;
        }
        for (d, p) in preds.iter().enumerate() {
            if p.eval(attrs) {
                members[d].push(id.clone());
            }
        }
    }
    let empty: Vec<String> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_empty())
        .map(|(d, _)| format!("{} ({})", spec.domain_names[d], spec.predicates[d]))
        .collect();
    if !empty.is_empty() {
        return Err(config(format!("empty domain(s): {}", empty.join(", "))));
    }
    Ok(DomainDatasets {
        domain_names: spec.domain_names.clone(),
        members,
    })
}

/// Number of output images that satisfy the exclusion predicate (should be 0).
pub fn exclusion_violations(
    index: &AttributeIndex,
    spec: &DomainSpec,
    sets: &DomainDatasets,
) -> Result<usize> {
    let exclusion = Predicate::parse(&spec.exclusion)?.compile(&index.attribute_names)?;
    let lookup: HashMap<&str, &[bool]> = index
        .entries
        .iter()
        .map(|(id, a)| (id.as_str(), a.as_slice()))
        .collect();
    let mut bad = 0;
    for m in &sets.members {
        for id in m {
            match lookup.get(id.as_str()) {
                Some(a) if exclusion.eval(a) => bad += 1,
                Some(_) => {}
                None => bad += 1,
            }
        }
    }
    Ok(bad)
}
