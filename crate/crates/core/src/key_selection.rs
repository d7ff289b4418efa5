//! Two-layer key selection: a per-flow SRAM ring of the most recent tokens and
//! a static TCAM-backed global set matched against a bucketed query signature.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::Token;
use crate::error::{Error, Result};
use crate::features::dot;
use crate::linalg;

/// Per-flow circular buffer of the `L` most recent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalWindow {
    capacity: usize,
    slots: VecDeque<Token>,
}

impl LocalWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: VecDeque::with_capacity(capacity),
        }
    }

    /// Window whose key storage `L d b_key` must fit `budget_bits`.
    pub fn with_budget(capacity: usize, d: usize, key_bits: u32, budget_bits: u64) -> Result<Self> {
        let required = window_bits(capacity, d, key_bits);
        if required > budget_bits {
            return Err(Error::BudgetExceeded {
                required_bits: required,
                budget_bits,
            });
        }
        Ok(Self::new(capacity))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Insert as newest, evicting the oldest when full. Returns the evicted
    /// token.
    pub fn push(&mut self, tok: Token) -> Option<Token> {
        if self.capacity == 0 {
            return Some(tok);
        }
        let evicted = if self.slots.len() == self.capacity {
            self.slots.pop_front()
        } else {
            None
        };
        self.slots.push_back(tok);
        evicted
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Token> {
        self.slots.iter()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.slots.iter().cloned().collect()
    }
}

pub fn window_push(w: &LocalWindow, tok: Token) -> LocalWindow {
    let mut next = w.clone();
    next.push(tok);
    next
}

/// Key storage of a window: `L d b_key`.
pub fn window_bits(capacity: usize, d: usize, key_bits: u32) -> u64 {
    capacity as u64 * d as u64 * key_bits as u64
}

/// One ternary entry. A bit set in `mask` is a care bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TernaryEntry {
    pub value: u128,
    pub mask: u128,
    pub priority: i64,
    pub payload: u64,
}

impl TernaryEntry {
    pub fn matches(&self, sig: u128) -> bool {
        (sig & self.mask) == (self.value & self.mask)
    }

    /// Table-file line: `priority value/mask -> payload`.
    pub fn to_line(&self) -> String {
        format!(
            "{} {:#x}/{:#x} -> {}",
            self.priority, self.value, self.mask, self.payload
        )
    }

    /// Parse a table-file line; anything after the payload is returned as
    /// trailing text.
    pub fn parse_line(line: &str) -> Result<(Self, Option<String>)> {
        let bad = || Error::Parse(format!("table entry: {line:?}"));
        let (lhs, rhs) = line.split_once("->").ok_or_else(bad)?;
        let mut left = lhs.split_whitespace();
        let priority: i64 = left.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let (value, mask) = parse_pattern(left.next().ok_or_else(bad)?)?;
        if left.next().is_some() {
            return Err(bad());
        }
        let mut right = rhs.split_whitespace();
        let payload: u64 = right.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let rest: Vec<&str> = right.collect();
        let trailing = (!rest.is_empty()).then(|| rest.join(" "));
        Ok((
            Self {
                value,
                mask,
                priority,
                payload,
            },
            trailing,
        ))
    }
}

/// `value/mask`, both hex with optional `0x`.
pub fn parse_pattern(s: &str) -> Result<(u128, u128)> {
    let (v, m) = s
        .split_once('/')
        .ok_or_else(|| Error::Parse(format!("pattern {s:?} is not value/mask")))?;
    Ok((parse_hex(v)?, parse_hex(m)?))
}

pub fn parse_hex(s: &str) -> Result<u128> {
    let digits = s.trim_start_matches("0x").trim_start_matches("0X");
    u128::from_str_radix(digits, 16).map_err(|_| Error::Parse(format!("bad hex pattern {s:?}")))
}

/// Sign-and-magnitude bucket encoding of a real vector into a ternary-
/// matchable bit pattern.
///
/// Coordinate `i` owns bits `4i..4i+4`: bit `4i+3` is the sign and bits
/// `4i..4i+3` hold the magnitude bucket, the number of edges `<= |x_i|`.
/// Bucket 0 is unsigned, so `q = 0` encodes to the all-zero pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureEncoder {
    pub edges: [f64; 7],
}

pub const BITS_PER_COORD: usize = 4;
pub const MAX_SIGNATURE_DIMS: usize = 128 / BITS_PER_COORD;
pub const DEFAULT_BUCKET_EDGES: [f64; 7] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0];

impl Default for SignatureEncoder {
    fn default() -> Self {
        Self {
            edges: DEFAULT_BUCKET_EDGES,
        }
    }
}

impl SignatureEncoder {
    pub fn new(edges: [f64; 7]) -> Result<Self> {
        if edges[0] <= 0.0 || edges.windows(2).any(|w| !(w[0] < w[1])) || !edges[6].is_finite() {
            return Err(Error::Config(format!(
                "bucket edges must be positive and strictly increasing: {edges:?}"
            )));
        }
        Ok(Self { edges })
    }

    pub fn bucket(&self, x: f64) -> u8 {
        let a = x.abs();
        self.edges.iter().take_while(|&&e| e <= a).count() as u8
    }

    pub fn encode(&self, q: &[f64]) -> Result<u128> {
        if q.len() > MAX_SIGNATURE_DIMS {
            return Err(Error::InvalidDimension(format!(
                "signature supports at most {MAX_SIGNATURE_DIMS} coordinates, got {}",
                q.len()
            )));
        }
        let mut sig = 0u128;
        for (i, &x) in q.iter().enumerate() {
            let b = self.bucket(x);
            let sign = (b > 0 && x < 0.0) as u128;
            sig |= ((sign << 3) | b as u128) << (BITS_PER_COORD * i);
        }
        Ok(sig)
    }

    /// Pattern matching queries that agree in sign with `key` on every
    /// coordinate whose bucket is at least `min_bucket`. A key with no such
    /// coordinate yields the all-wildcard pattern.
    pub fn key_pattern(&self, key: &[f64], min_bucket: u8) -> Result<(u128, u128)> {
        let sig = self.encode(key)?;
        let mut mask = 0u128;
        for (i, &x) in key.iter().enumerate() {
            if self.bucket(x) >= min_bucket.max(1) {
                mask |= 0b1000u128 << (BITS_PER_COORD * i);
            }
        }
        Ok((sig & mask, mask))
    }
}

pub fn quantize_query_signature(enc: &SignatureEncoder, q: &[f64]) -> Result<u128> {
    enc.encode(q)
}

/// Static TCAM-backed global token set. Never edited in place: the control
/// plane builds a new index and swaps it in whole.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalIndex {
    encoder: SignatureEncoder,
    entries: Vec<TernaryEntry>,
    tokens: BTreeMap<u64, Token>,
    capacity: usize,
}

impl GlobalIndex {
    pub fn empty(encoder: SignatureEncoder, capacity: usize) -> Self {
        Self {
            encoder,
            entries: Vec::new(),
            tokens: BTreeMap::new(),
            capacity,
        }
    }

    pub fn new(
        encoder: SignatureEncoder,
        entries: Vec<TernaryEntry>,
        tokens: Vec<Token>,
        capacity: usize,
    ) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::BudgetViolation(format!(
                "{} TCAM entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        let tokens: BTreeMap<u64, Token> = tokens.into_iter().map(|t| (t.id, t)).collect();
        if let Some(e) = entries.iter().find(|e| !tokens.contains_key(&e.payload)) {
            return Err(Error::Config(format!("entry payload {} has no token", e.payload)));
        }
        Ok(Self {
            encoder,
            entries,
            tokens,
            capacity,
        })
    }

    /// One entry per token, matching on the signs of the token's strong key
    /// coordinates.
    pub fn from_tokens(
        encoder: SignatureEncoder,
        tokens: Vec<(Token, i64)>,
        min_bucket: u8,
        capacity: usize,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(tokens.len());
        for (tok, priority) in &tokens {
            let (value, mask) = encoder.key_pattern(&tok.key, min_bucket)?;
            entries.push(TernaryEntry {
                value,
                mask,
                priority: *priority,
                payload: tok.id,
            });
        }
        Self::new(encoder, entries, tokens.into_iter().map(|(t, _)| t).collect(), capacity)
    }

    pub fn encoder(&self) -> &SignatureEncoder {
        &self.encoder
    }

    pub fn entries(&self) -> &[TernaryEntry] {
        &self.entries
    }

    pub fn token(&self, id: u64) -> Option<&Token> {
        self.tokens.get(&id)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.tokens.values()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Matching entries by descending priority, ties in table order.
    pub fn matching_entries(&self, sig: u128) -> Vec<&TernaryEntry> {
        let mut hits: Vec<&TernaryEntry> = self.entries.iter().filter(|e| e.matches(sig)).collect();
        hits.sort_by_key(|e| std::cmp::Reverse(e.priority));
        hits
    }

    /// Table-file text: `!edges`, `@token` lines, then one entry per line.
    pub fn to_table_text(&self) -> String {
        let mut out = String::new();
        let edges: Vec<String> = self.encoder.edges.iter().map(|e| e.to_string()).collect();
        writeln!(out, "!edges {}", edges.join(",")).unwrap();
        writeln!(out, "!capacity {}", self.capacity).unwrap();
        for t in self.tokens.values() {
            writeln!(out, "{}", token_line(t)).unwrap();
        }
        for e in &self.entries {
            writeln!(out, "{}", e.to_line()).unwrap();
        }
        out
    }

    pub fn from_table_text(text: &str) -> Result<Self> {
        let mut encoder = SignatureEncoder::default();
        let mut capacity = None;
        let mut tokens = Vec::new();
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("!edges") {
                let v = parse_floats(rest.trim(), ',')?;
                let arr: [f64; 7] = v.try_into().map_err(|_| Error::Parse("!edges needs 7 values".into()))?;
                encoder = SignatureEncoder::new(arr)?;
            } else if let Some(rest) = line.strip_prefix("!capacity") {
                capacity = Some(rest.trim().parse().map_err(|_| Error::Parse(line.into()))?);
            } else if line.starts_with("@token") {
                tokens.push(parse_token_line(line)?);
            } else {
                let (e, trailing) = TernaryEntry::parse_line(line)?;
                if trailing.is_some() {
                    return Err(Error::Parse(format!("unexpected trailing text: {line:?}")));
                }
                entries.push(e);
            }
        }
        let capacity = capacity.unwrap_or(entries.len());
        Self::new(encoder, entries, tokens, capacity)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table_text(&std::fs::read_to_string(path)?)
    }
}

/// `@token id k0,k1,... ; v0,v1,...`
pub fn token_line(t: &Token) -> String {
    let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    format!("@token {} {} ; {}", t.id, join(&t.key), join(&t.value))
}

pub fn parse_token_line(line: &str) -> Result<Token> {
    let bad = || Error::Parse(format!("token line: {line:?}"));
    let rest = line.strip_prefix("@token").ok_or_else(bad)?.trim();
    let (id, rest) = rest.split_once(char::is_whitespace).ok_or_else(bad)?;
    let (k, v) = rest.split_once(';').ok_or_else(bad)?;
    Ok(Token {
        id: id.parse().map_err(|_| bad())?,
        key: parse_floats(k.trim(), ',')?,
        value: parse_floats(v.trim(), ',')?,
    })
}

fn parse_floats(s: &str, sep: char) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(sep)
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number {x:?}")))
        })
        .collect()
}

pub fn tcam_lookup(g: &GlobalIndex, sig: u128) -> Vec<Token> {
    g.matching_entries(sig)
        .into_iter()
        .filter_map(|e| g.token(e.payload).cloned())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedKey {
    pub token: Token,
    pub source: Provenance,
    /// TCAM priority for global keys, `None` for local ones.
    pub priority: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeySelection {
    pub keys: Vec<SelectedKey>,
    /// Union size before the cap.
    pub candidates: usize,
    pub tcam_matches: usize,
    pub dropped: usize,
}

impl KeySelection {
    /// `N_t`, the number of keys handed to Map/SumReduce.
    pub fn n_t(&self) -> usize {
        self.keys.len()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.keys.iter().map(|k| k.token.clone()).collect()
    }

    pub fn count(&self, source: Provenance) -> usize {
        self.keys.iter().filter(|k| k.source == source).count()
    }
}

/// Default `N_t` cap.
pub const DEFAULT_SELECTION_CAP: usize = 32;

/// `L_t ∪ G(q_t)`, de-duplicated by token id with the local copy kept.
///
/// When the union exceeds `cap`, global keys go first, lowest priority first,
/// then the oldest local keys.
pub fn select_keys(w: &LocalWindow, g: &GlobalIndex, q: &[f64], cap: usize) -> Result<KeySelection> {
    let sig = g.encoder.encode(q)?;
    let hits = g.matching_entries(sig);
    let mut keys: Vec<SelectedKey> = w
        .iter()
        .map(|t| SelectedKey {
            token: t.clone(),
            source: Provenance::Local,
            priority: None,
        })
        .collect();
    let mut seen: HashSet<u64> = keys.iter().map(|k| k.token.id).collect();
    let mut globals = Vec::new();
    for e in &hits {
        if seen.insert(e.payload) {
            if let Some(tok) = g.token(e.payload) {
                globals.push(SelectedKey {
                    token: tok.clone(),
                    source: Provenance::Global,
                    priority: Some(e.priority),
                });
            }
        }
    }
    let candidates = keys.len() + globals.len();
    let mut dropped = 0;
    // globals are already in descending priority order
    while keys.len() + globals.len() > cap && !globals.is_empty() {
        globals.pop();
        dropped += 1;
    }
    if keys.len() > cap {
        dropped += keys.len() - cap;
        keys.drain(..keys.len() - cap);
    }
    keys.extend(globals);
    Ok(KeySelection {
        keys,
        candidates,
        tcam_matches: hits.len(),
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetainedMass {
    pub fraction: f64,
    pub alpha: f64,
}

fn kernel_logits(q: &[f64], keys: &[&[f64]], d: usize) -> Vec<f64> {
    let s = (d as f64).sqrt().recip();
    keys.iter().map(|k| dot(q, k) * s).collect()
}

/// Share of the softmax kernel mass of `universe` carried by `selected`.
pub fn retained_mass(q: &[f64], selected: &[Token], universe: &[Token], d: usize) -> RetainedMass {
    let sel: Vec<&[f64]> = selected.iter().map(|t| t.key.as_slice()).collect();
    let uni: Vec<&[f64]> = universe.iter().map(|t| t.key.as_slice()).collect();
    let ls = kernel_logits(q, &sel, d);
    let lu = kernel_logits(q, &uni, d);
    let shift = lu.iter().chain(&ls).copied().fold(f64::NEG_INFINITY, f64::max);
    if sel.is_empty() || !shift.is_finite() {
        return RetainedMass {
            fraction: 0.0,
            alpha: 1.0,
        };
    }
    let num: f64 = ls.iter().map(|l| (l - shift).exp()).sum();
    let den: f64 = lu.iter().map(|l| (l - shift).exp()).sum();
    let fraction = num / den;
    RetainedMass {
        fraction,
        alpha: 1.0 - fraction,
    }
}

/// `sum_k exp(q.k / sqrt d) k k^T` over `keys`, scaled by `exp(-shift)`.
fn weighted_moment(q: &[f64], keys: &[Token], d: usize, shift: f64) -> nalgebra::DMatrix<f64> {
    let mut m = nalgebra::DMatrix::zeros(d, d);
    let s = (d as f64).sqrt().recip();
    for k in keys {
        let w = (dot(q, &k.key) * s - shift).exp();
        let v = nalgebra::DVector::from_column_slice(&k.key);
        m += w * &v * v.transpose();
    }
    m
}

/// Smallest eigenvalue of `Cov(selected) - (1 - alpha) Cov(universe)`, with
/// `Cov` the kernel-weighted second moment, normalized by the universe's
/// total kernel weight.
pub fn coverage_margin(q: &[f64], selected: &[Token], universe: &[Token], alpha: f64, d: usize) -> f64 {
    let shift = universe
        .iter()
        .chain(selected)
        .map(|k| dot(q, &k.key) / (d as f64).sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return 0.0;
    }
    let total: f64 = universe
        .iter()
        .map(|k| (dot(q, &k.key) / (d as f64).sqrt() - shift).exp())
        .sum();
    let diff = weighted_moment(q, selected, d, shift) - (1.0 - alpha) * weighted_moment(q, universe, d, shift);
    linalg::min_symmetric_eigenvalue(diff / total)
}

/// `Cov(selected) ⪰ (1 - alpha) Cov(universe)` up to `tol`.
pub fn coverage_loewner_check(
    q: &[f64],
    selected: &[Token],
    universe: &[Token],
    alpha: f64,
    tol: f64,
    d: usize,
) -> bool {
    coverage_margin(q, selected, universe, alpha, d) >= -tol
}

/// Nine keys on the first axis and one on the second, omitting the latter:
/// only ten percent of the mass is lost, yet the second direction loses all
/// of its second moment.
pub fn anisotropic_counterexample() -> (Vec<f64>, Vec<Token>, Vec<Token>) {
    let mut universe: Vec<Token> = (0..9).map(|i| Token::new(i, vec![1.0, 0.0], vec![0.0])).collect();
    universe.push(Token::new(9, vec![0.0, 1.0], vec![0.0]));
    let selected = universe[..9].to_vec();
    (vec![0.0, 0.0], selected, universe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsattn_testkit::fixtures::{self, MassFixture, ScanFixture};
    use nsattn_testkit::{oracle_kernel_mass, oracle_scan_match, oracle_window};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tok(id: u64, key: Vec<f64>) -> Token {
        Token::new(id, key, vec![id as f64])
    }

    fn entry(value: u128, mask: u128, priority: i64, payload: u64) -> TernaryEntry {
        TernaryEntry {
            value,
            mask,
            priority,
            payload,
        }
    }

    #[test]
    fn window_fifo() {
        let mut w = LocalWindow::new(3);
        w.push(tok(0, vec![0.0]));
        assert_eq!(w.len(), 1);
        for i in 1..3 {
            assert!(w.push(tok(i, vec![0.0])).is_none());
        }
        assert_eq!(w.push(tok(3, vec![0.0])).unwrap().id, 0);
        assert!(w.iter().all(|t| t.id != 0));
        let ids: Vec<u64> = (0..6).collect();
        let mut w = LocalWindow::new(3);
        for &i in &ids {
            w = window_push(&w, tok(i, vec![0.0]));
        }
        let got: Vec<u64> = w.iter().map(|t| t.id).collect();
        assert_eq!(got, oracle_window(&ids, 3));
        assert!(LocalWindow::new(0).push(tok(1, vec![])).is_some());
    }

    #[test]
    fn window_budget() {
        assert!(LocalWindow::with_budget(64, 8, 16, 8192).is_ok());
        assert!(matches!(
            LocalWindow::with_budget(65, 8, 16, 8192),
            Err(Error::BudgetExceeded {
                required_bits: 8320,
                budget_bits: 8192
            })
        ));
    }

    #[test]
    fn signature_encoding() {
        let enc = SignatureEncoder::default();
        assert_eq!(enc.encode(&[0.0; 8]).unwrap(), 0);
        assert_eq!(enc.encode(&[-0.1, 0.2]).unwrap(), 0);
        assert_eq!(enc.encode(&[0.3, 0.4]).unwrap(), enc.encode(&[0.26, 0.49]).unwrap());
        // edges 0.25 0.5 0.75 1 1.5 2 3
        let q = [0.3, -0.6, 0.8, -1.2, 1.7, -2.5, 5.0, -0.1];
        // coord: bucket, sign -> nibble
        // 0.3: 1,0 -> 0x1; -0.6: 2,1 -> 0xA; 0.8: 3,0 -> 0x3; -1.2: 4,1 -> 0xC
        // 1.7: 5,0 -> 0x5; -2.5: 6,1 -> 0xE; 5.0: 7,0 -> 0x7; -0.1: 0 -> 0x0
        assert_eq!(enc.encode(&q).unwrap(), 0x07E5_C3A1);
        assert!(enc.encode(&[0.0; 33]).is_err());
        assert!(SignatureEncoder::new([0.1, 0.2, 0.2, 0.3, 0.4, 0.5, 0.6]).is_err());
    }

    #[test]
    fn key_pattern_matches_sign_agreement() {
        let enc = SignatureEncoder::default();
        let (v, m) = enc.key_pattern(&[1.0, -0.1, -0.9], 2).unwrap();
        assert_eq!(m, 0x808);
        assert_eq!(v, 0x800);
        let e = entry(v, m, 0, 0);
        assert!(e.matches(enc.encode(&[0.3, 2.0, -0.5]).unwrap()));
        assert!(!e.matches(enc.encode(&[-0.3, 2.0, -0.5]).unwrap()));
        assert_eq!(enc.key_pattern(&[0.1, 0.1], 2).unwrap(), (0, 0));
    }

    #[test]
    fn lookup_basics() {
        let g = GlobalIndex::empty(SignatureEncoder::default(), 10);
        assert!(tcam_lookup(&g, 0x1234).is_empty());
        let g = GlobalIndex::new(
            SignatureEncoder::default(),
            vec![entry(0, 0, 1, 7)],
            vec![tok(7, vec![1.0])],
            4,
        )
        .unwrap();
        for sig in [0u128, 1, u128::MAX] {
            assert_eq!(tcam_lookup(&g, sig)[0].id, 7);
        }
        assert!(GlobalIndex::new(
            SignatureEncoder::default(),
            vec![entry(0, 0, 1, 7); 5],
            vec![tok(7, vec![])],
            4
        )
        .is_err());
        assert!(GlobalIndex::new(SignatureEncoder::default(), vec![entry(0, 0, 1, 8)], vec![], 4).is_err());
    }

    #[test]
    fn lookup_matches_scan_fixtures() {
        for f in fixtures::load::<Vec<ScanFixture>>("scan_match") {
            let entries: Vec<TernaryEntry> = f
                .entries
                .iter()
                .map(|(v, m, p, id)| entry(fixtures::parse_hex(v), fixtures::parse_hex(m), *p, *id))
                .collect();
            let tokens: Vec<Token> = entries.iter().map(|e| tok(e.payload, vec![])).collect();
            let cap = entries.len();
            let g = GlobalIndex::new(SignatureEncoder::default(), entries, tokens, cap).unwrap();
            let got: Vec<u64> = tcam_lookup(&g, fixtures::parse_hex(&f.signature))
                .iter()
                .map(|t| t.id)
                .collect();
            assert_eq!(got, f.expected, "{}", f.name);
        }
    }

    #[test]
    fn table_text_round_trip() {
        let tokens = vec![
            (Token::new(3, vec![1.0, -0.7], vec![0.25]), 5),
            (Token::new(9, vec![0.1, 0.6], vec![-1.5]), 2),
        ];
        let g = GlobalIndex::from_tokens(SignatureEncoder::default(), tokens, 2, 8).unwrap();
        let text = g.to_table_text();
        assert!(text.contains("5 0x80/0x88 -> 3"), "{text}");
        let back = GlobalIndex::from_table_text(&text).unwrap();
        assert_eq!(back, g);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.tbl");
        g.save(&p).unwrap();
        assert_eq!(GlobalIndex::load(&p).unwrap(), g);
        assert!(TernaryEntry::parse_line("x 0x1/0x1 -> 2").is_err());
        assert!(TernaryEntry::parse_line("1 0x1 -> 2").is_err());
        let (e, rest) = TernaryEntry::parse_line("3 ff/0F -> 2 0.5").unwrap();
        assert_eq!((e.value, e.mask, rest.as_deref()), (0xff, 0xf, Some("0.5")));
    }

    fn index_of(tokens: &[(Token, i64)]) -> GlobalIndex {
        let entries = tokens.iter().map(|(t, p)| entry(0, 0, *p, t.id)).collect();
        GlobalIndex::new(
            SignatureEncoder::default(),
            entries,
            tokens.iter().map(|(t, _)| t.clone()).collect(),
            100,
        )
        .unwrap()
    }

    #[test]
    fn selection_union_semantics() {
        let w = LocalWindow::new(4);
        let g = GlobalIndex::empty(SignatureEncoder::default(), 4);
        let s = select_keys(&w, &g, &[0.0], 32).unwrap();
        assert_eq!(s.n_t(), 0);

        let mut w = LocalWindow::new(4);
        w.push(tok(1, vec![0.0]));
        w.push(tok(2, vec![0.0]));
        let g = index_of(&[(Token::new(2, vec![9.0], vec![-1.0]), 3), (tok(5, vec![0.0]), 1)]);
        let s = select_keys(&w, &g, &[0.0], 32).unwrap();
        let ids: Vec<(u64, Provenance)> = s.keys.iter().map(|k| (k.token.id, k.source)).collect();
        assert_eq!(
            ids,
            vec![(1, Provenance::Local), (2, Provenance::Local), (5, Provenance::Global)]
        );
        // local copy kept
        assert_eq!(s.keys[1].token.key, vec![0.0]);
        assert!(s.n_t() <= w.len() + s.tcam_matches);
    }

    #[test]
    fn selection_cap_drops_lowest_priority_globals_first() {
        let mut w = LocalWindow::new(3);
        for i in 0..3 {
            w.push(tok(i, vec![0.0]));
        }
        let g = index_of(&[
            (tok(10, vec![0.0]), 1),
            (tok(11, vec![0.0]), 9),
            (tok(12, vec![0.0]), 5),
        ]);
        let s = select_keys(&w, &g, &[0.0], 4).unwrap();
        let ids: Vec<u64> = s.keys.iter().map(|k| k.token.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 11]);
        assert_eq!((s.candidates, s.dropped), (6, 2));
        let s = select_keys(&w, &g, &[0.0], 2).unwrap();
        let ids: Vec<u64> = s.keys.iter().map(|k| k.token.id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(s.dropped, 4);
    }

    #[test]
    fn mass_basics_and_fixtures() {
        let universe: Vec<Token> = (0..5).map(|i| tok(i, vec![i as f64 * 0.3, -0.2])).collect();
        let q = [0.5, 1.0];
        let all = retained_mass(&q, &universe, &universe, 2);
        assert!((all.fraction - 1.0).abs() < 1e-15);
        let none = retained_mass(&q, &[], &universe, 2);
        assert_eq!((none.fraction, none.alpha), (0.0, 1.0));
        for f in fixtures::load::<Vec<MassFixture>>("kernel_mass") {
            let uni: Vec<Token> = f
                .universe
                .iter()
                .enumerate()
                .map(|(i, k)| tok(i as u64, k.clone()))
                .collect();
            let sel: Vec<Token> = f.selected_idx.iter().map(|&i| uni[i].clone()).collect();
            let m = retained_mass(&f.q, &sel, &uni, f.d);
            assert!((m.fraction - f.expected_fraction).abs() < 1e-12, "{}", f.name);
            assert!((m.fraction + m.alpha - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loewner_check_cases() {
        let universe: Vec<Token> = (0..6)
            .map(|i| tok(i, vec![(i as f64).sin(), (i as f64).cos()]))
            .collect();
        let q = [0.2, -0.4];
        assert!(coverage_loewner_check(&q, &universe, &universe, 0.0, 1e-9, 2));
        assert!(coverage_loewner_check(&q, &[], &universe, 1.0, 1e-9, 2));
        let (q, sel, uni) = anisotropic_counterexample();
        let m = retained_mass(&q, &sel, &uni, 2);
        assert!((m.alpha - 0.1).abs() < 1e-12);
        assert!(!coverage_loewner_check(&q, &sel, &uni, m.alpha, 1e-9, 2));
        assert!((coverage_margin(&q, &sel, &uni, m.alpha, 2) + 0.09).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lookup_agrees_with_linear_scan(seed in any::<u64>(), n in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<TernaryEntry> = (0..n)
                .map(|i| entry(rng.random::<u16>() as u128, rng.random::<u16>() as u128, rng.random_range(-3..4), i as u64))
                .collect();
            let tokens: Vec<Token> = entries.iter().map(|e| tok(e.payload, vec![])).collect();
            let scan: Vec<(u128, u128, i64, u64)> = entries.iter().map(|e| (e.value, e.mask, e.priority, e.payload)).collect();
            let g = GlobalIndex::new(SignatureEncoder::default(), entries, tokens, n).unwrap();
            for _ in 0..20 {
                let sig = rng.random::<u16>() as u128;
                let got: Vec<u64> = tcam_lookup(&g, sig).iter().map(|t| t.id).collect();
                prop_assert_eq!(got, oracle_scan_match(&scan, sig).unwrap());
            }
        }

        #[test]
        fn mass_identity_and_oracle(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let universe: Vec<Token> = (0..n).map(|i| tok(i as u64, (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())).collect();
            let sel: Vec<Token> = universe.iter().filter(|_| rng.random::<bool>()).cloned().collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let m = retained_mass(&q, &sel, &universe, 3);
            prop_assert!((m.fraction + m.alpha - 1.0).abs() < 1e-12);
            let sk: Vec<Vec<f64>> = sel.iter().map(|t| t.key.clone()).collect();
            let uk: Vec<Vec<f64>> = universe.iter().map(|t| t.key.clone()).collect();
            let expect = oracle_kernel_mass(&q, &sk, &uk, 3).unwrap();
            prop_assert!((m.fraction - expect).abs() < 1e-12);
        }

        #[test]
        fn window_matches_deque_oracle(cap in 0usize..8, n in 0usize..30) {
            let ids: Vec<u64> = (0..n as u64).collect();
            let mut w = LocalWindow::new(cap);
            for &i in &ids { w.push(tok(i, vec![])); }
            let got: Vec<u64> = w.iter().map(|t| t.id).collect();
            prop_assert_eq!(got, oracle_window(&ids, cap));
        }
    }
}
