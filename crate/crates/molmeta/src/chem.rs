//! Restricted SMILES parsing and categorical atom/bond featurization.
//!
//! The grammar covers the organic subset written bare (`B C N O P S F Cl Br
//! I`), aromatic lowercase atoms, bracket atoms with hydrogen counts and
//! formal charges, branches, ring-closure digits (`1`–`9` and `%nn`), and
//! explicit bond symbols `- = # :`. Stereochemistry, isotopes, wildcards and
//! multi-fragment input are rejected explicitly — never silently skipped.
//!
//! Implicit hydrogens are not materialized; the downstream encoder only
//! consumes heavy-atom structure.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChemError {
    #[error("ring bond {digit} opened at byte {pos} is never closed")]
    UnclosedRing { digit: u16, pos: usize },
    #[error("unbalanced parenthesis at byte {pos}")]
    UnbalancedParenthesis { pos: usize },
    #[error("unknown token {token:?} at byte {pos}")]
    UnknownToken { token: char, pos: usize },
    #[error("unsupported SMILES feature at byte {pos}: {what}")]
    UnsupportedFeature { pos: usize, what: String },
}

fn unsupported(pos: usize, what: impl Into<String>) -> ChemError {
    ChemError::UnsupportedFeature {
        pos,
        what: what.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    pub symbol: String,
    pub aromatic: bool,
    pub charge: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.a == atom || b.b == atom)
            .count()
    }
}

/// Element vocabulary for featurization; anything else maps to the trailing
/// "other" class.
pub const ELEMENT_VOCAB: [&str; 10] = ["H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I"];
/// Number of element classes including "other".
pub const ELEMENT_CLASSES: usize = ELEMENT_VOCAB.len() + 1;
/// Degree feature is capped at this value, giving classes `0..=MAX_DEGREE`.
pub const MAX_DEGREE: usize = 6;
pub const DEGREE_CLASSES: usize = MAX_DEGREE + 1;
pub const BOND_CLASSES: usize = 4;

/// Categorical per-atom and per-bond indices consumed by the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizedMolecule {
    pub element_ids: Vec<usize>,
    pub degrees: Vec<usize>,
    /// Unordered atom pairs, one entry per bond, aligned with `bond_classes`.
    pub edges: Vec<(usize, usize)>,
    pub bond_classes: Vec<usize>,
}

impl FeaturizedMolecule {
    pub fn atom_count(&self) -> usize {
        self.element_ids.len()
    }
}

pub fn element_class(symbol: &str) -> usize {
    ELEMENT_VOCAB
        .iter()
        .position(|&e| e == symbol)
        .unwrap_or(ELEMENT_VOCAB.len())
}

pub fn bond_class(order: BondOrder) -> usize {
    match order {
        BondOrder::Single => 0,
        BondOrder::Double => 1,
        BondOrder::Triple => 2,
        BondOrder::Aromatic => 3,
    }
}

pub fn featurize(g: &MolecularGraph) -> FeaturizedMolecule {
    let mut degrees = vec![0usize; g.atoms.len()];
    let mut edges = Vec::with_capacity(g.bonds.len());
    let mut bond_classes = Vec::with_capacity(g.bonds.len());
    for bond in &g.bonds {
        degrees[bond.a] += 1;
        degrees[bond.b] += 1;
        edges.push((bond.a, bond.b));
        bond_classes.push(bond_class(bond.order));
    }
    FeaturizedMolecule {
        element_ids: g.atoms.iter().map(|a| element_class(&a.symbol)).collect(),
        degrees: degrees.into_iter().map(|d| d.min(MAX_DEGREE)).collect(),
        edges,
        bond_classes,
    }
}

struct Parser<'s> {
    chars: std::iter::Peekable<std::str::CharIndices<'s>>,
    len: usize,
    graph: MolecularGraph,
    /// Atom the next bond attaches to.
    prev: Option<usize>,
    /// Branch anchors.
    stack: Vec<usize>,
    /// Explicit bond symbol waiting for its second endpoint.
    pending: Option<BondOrder>,
    /// Open ring digits → (atom, explicit order at open, open position).
    rings: BTreeMap<u16, (usize, Option<BondOrder>, usize)>,
}

pub fn parse_smiles(s: &str) -> Result<MolecularGraph, ChemError> {
    if s.is_empty() {
        return Err(unsupported(0, "empty input"));
    }
    let mut p = Parser {
        chars: s.char_indices().peekable(),
        len: s.len(),
        graph: MolecularGraph::default(),
        prev: None,
        stack: Vec::new(),
        pending: None,
        rings: BTreeMap::new(),
    };
    p.run()?;
    Ok(p.graph)
}

impl Parser<'_> {
    fn run(&mut self) -> Result<(), ChemError> {
        while let Some((pos, c)) = self.chars.next() {
            match c {
                'C' if self.peek_is('l') => {
                    self.chars.next();
                    self.add_atom(pos, "Cl", false, 0)?;
                }
                'B' if self.peek_is('r') => {
                    self.chars.next();
                    self.add_atom(pos, "Br", false, 0)?;
                }
                'B' | 'C' | 'N' | 'O' | 'P' | 'S' | 'F' | 'I' => {
                    self.add_atom(pos, &c.to_string(), false, 0)?;
                }
                'b' | 'c' | 'n' | 'o' | 'p' | 's' => {
                    self.add_atom(pos, &c.to_uppercase().to_string(), true, 0)?;
                }
                '[' => self.bracket_atom(pos)?,
                '(' => {
                    let anchor = self
                        .prev
                        .ok_or(ChemError::UnbalancedParenthesis { pos })?;
                    self.stack.push(anchor);
                }
                ')' => {
                    let anchor = self
                        .stack
                        .pop()
                        .ok_or(ChemError::UnbalancedParenthesis { pos })?;
                    self.prev = Some(anchor);
                }
                '-' => self.set_pending(pos, BondOrder::Single)?,
                '=' => self.set_pending(pos, BondOrder::Double)?,
                '#' => self.set_pending(pos, BondOrder::Triple)?,
                ':' => self.set_pending(pos, BondOrder::Aromatic)?,
                '1'..='9' => self.ring_digit(pos, c as u16 - '0' as u16)?,
                '%' => {
                    let d1 = self.expect_digit(pos)?;
                    let d2 = self.expect_digit(pos)?;
                    self.ring_digit(pos, d1 * 10 + d2)?;
                }
                '.' => return Err(unsupported(pos, "multi-fragment input")),
                '/' | '\\' | '@' => return Err(unsupported(pos, "stereochemistry")),
                other => return Err(ChemError::UnknownToken { token: other, pos }),
            }
        }
        if let Some(&digit) = self.rings.keys().next() {
            let (_, _, pos) = self.rings[&digit];
            return Err(ChemError::UnclosedRing { digit, pos });
        }
        if !self.stack.is_empty() {
            return Err(ChemError::UnbalancedParenthesis { pos: self.len });
        }
        if self.pending.is_some() {
            return Err(unsupported(self.len, "dangling bond symbol"));
        }
        Ok(())
    }

    fn peek_is(&mut self, want: char) -> bool {
        matches!(self.chars.peek(), Some(&(_, c)) if c == want)
    }

    fn expect_digit(&mut self, at: usize) -> Result<u16, ChemError> {
        match self.chars.next() {
            Some((_, c)) if c.is_ascii_digit() => Ok(c as u16 - '0' as u16),
            Some((pos, c)) => Err(ChemError::UnknownToken { token: c, pos }),
            None => Err(unsupported(at, "truncated %nn ring number")),
        }
    }

    fn set_pending(&mut self, pos: usize, order: BondOrder) -> Result<(), ChemError> {
        if self.pending.is_some() {
            return Err(unsupported(pos, "doubled bond symbol"));
        }
        if self.prev.is_none() {
            return Err(unsupported(pos, "bond symbol before any atom"));
        }
        self.pending = Some(order);
        Ok(())
    }

    fn add_atom(
        &mut self,
        pos: usize,
        symbol: &str,
        aromatic: bool,
        charge: i8,
    ) -> Result<(), ChemError> {
        let idx = self.graph.atoms.len();
        self.graph.atoms.push(Atom {
            symbol: symbol.to_string(),
            aromatic,
            charge,
        });
        if let Some(prev) = self.prev {
            let order = self
                .pending
                .take()
                .unwrap_or_else(|| default_order(&self.graph.atoms, prev, idx));
            self.push_bond(pos, prev, idx, order)?;
        }
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_digit(&mut self, pos: usize, digit: u16) -> Result<(), ChemError> {
        let here = self
            .prev
            .ok_or(unsupported(pos, "ring digit before any atom"))?;
        let explicit = self.pending.take();
        match self.rings.remove(&digit) {
            None => {
                self.rings.insert(digit, (here, explicit, pos));
            }
            Some((opened, open_order, open_pos)) => {
                if opened == here {
                    return Err(unsupported(pos, "ring bond to the same atom"));
                }
                let order = match (open_order, explicit) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(unsupported(pos, "conflicting ring-closure bond orders"))
                    }
                    (a, b) => a
                        .or(b)
                        .unwrap_or_else(|| default_order(&self.graph.atoms, opened, here)),
                };
                let _ = open_pos;
                self.push_bond(pos, opened, here, order)?;
            }
        }
        Ok(())
    }

    fn push_bond(
        &mut self,
        pos: usize,
        a: usize,
        b: usize,
        order: BondOrder,
    ) -> Result<(), ChemError> {
        if self
            .graph
            .bonds
            .iter()
            .any(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
        {
            return Err(unsupported(pos, "duplicate bond between the same atoms"));
        }
        self.graph.bonds.push(Bond { a, b, order });
        Ok(())
    }

    /// `[symbol]`, `[symbol H<count>]`, `[symbol charge]` and combinations.
    fn bracket_atom(&mut self, open: usize) -> Result<(), ChemError> {
        let unterminated = || unsupported(open, "unterminated bracket atom");
        let (pos, first) = self.chars.next().ok_or_else(unterminated)?;
        if first.is_ascii_digit() {
            return Err(unsupported(pos, "isotope specification"));
        }
        if first == '@' {
            return Err(unsupported(pos, "stereochemistry"));
        }
        let mut aromatic = false;
        let mut symbol = String::new();
        if first.is_ascii_uppercase() {
            symbol.push(first);
            if let Some(&(_, c)) = self.chars.peek() {
                // two-letter element; an uppercase follower like the H in
                // [CH4] is not part of the symbol
                if c.is_ascii_lowercase() {
                    symbol.push(c);
                    self.chars.next();
                }
            }
        } else if first.is_ascii_lowercase() {
            aromatic = true;
            symbol.push(first.to_ascii_uppercase());
            if let Some(&(_, c)) = self.chars.peek() {
                if c.is_ascii_lowercase() && first != 'c' && first != 'n' && first != 'o' {
                    // lowercase pairs like [se]; single-letter aromatics
                    // never take a second letter
                    symbol.push(c);
                    self.chars.next();
                }
            }
        } else {
            return Err(ChemError::UnknownToken { token: first, pos });
        }

        // optional hydrogen count: parsed for grammar coverage, then dropped
        // (implicit hydrogens are not materialized)
        if self.peek_is('H') {
            self.chars.next();
            while matches!(self.chars.peek(), Some(&(_, c)) if c.is_ascii_digit()) {
                self.chars.next();
            }
        }

        let mut charge: i8 = 0;
        if let Some(&(_, sign @ ('+' | '-'))) = self.chars.peek() {
            self.chars.next();
            let unit: i8 = if sign == '+' { 1 } else { -1 };
            charge = unit;
            if let Some(&(_, c)) = self.chars.peek() {
                if c.is_ascii_digit() {
                    self.chars.next();
                    charge = unit * (c as i8 - b'0' as i8);
                } else {
                    while self.peek_is(sign) {
                        self.chars.next();
                        charge += unit;
                    }
                }
            }
        }

        match self.chars.next() {
            Some((_, ']')) => self.add_atom(open, &symbol, aromatic, charge),
            Some((pos, '@')) => Err(unsupported(pos, "stereochemistry")),
            Some((pos, c)) => Err(ChemError::UnknownToken { token: c, pos }),
            None => Err(unterminated()),
        }
    }
}

/// Bond order when no explicit symbol is given: aromatic between two
/// aromatic atoms, single otherwise.
fn default_order(atoms: &[Atom], a: usize, b: usize) -> BondOrder {
    if atoms[a].aromatic && atoms[b].aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}

/// Serializes a connected graph back to SMILES. Inverse of [`parse_smiles`]
/// up to atom ordering: re-parsing reproduces the same atom and bond
/// multisets. Panics on empty or disconnected input.
pub fn to_smiles(g: &MolecularGraph) -> String {
    assert!(!g.atoms.is_empty(), "cannot serialize an empty graph");
    let n = g.atoms.len();
    let mut adj: Vec<Vec<(usize, BondOrder)>> = vec![Vec::new(); n];
    for b in &g.bonds {
        adj[b.a].push((b.b, b.order));
        adj[b.b].push((b.a, b.order));
    }

    // DFS from atom 0: classify tree edges and ring (back) edges, assigning
    // ring numbers in discovery order
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, BondOrder)>> = vec![Vec::new(); n];
    let mut ring_digits: Vec<Vec<(u16, BondOrder, bool)>> = vec![Vec::new(); n];
    let mut next_ring: u16 = 1;
    // explicit stack to sidestep recursion limits on long chains
    let mut stack = vec![0usize];
    let mut seen_edge = vec![false; g.bonds.len()];
    let edge_index: BTreeMap<(usize, usize), usize> = g
        .bonds
        .iter()
        .enumerate()
        .map(|(i, b)| ((b.a.min(b.b), b.a.max(b.b)), i))
        .collect();
    visited[0] = true;
    while let Some(u) = stack.pop() {
        for &(v, order) in &adj[u] {
            let eidx = edge_index[&(u.min(v), u.max(v))];
            if seen_edge[eidx] {
                continue;
            }
            seen_edge[eidx] = true;
            if visited[v] {
                // ring edge; the parser accepts the digit pair in either
                // text order, so which endpoint carries the bond symbol
                // does not matter
                assert!(next_ring <= 99, "more than 99 ring closures");
                ring_digits[v].push((next_ring, order, true));
                ring_digits[u].push((next_ring, order, false));
                next_ring += 1;
            } else {
                visited[v] = true;
                children[u].push((v, order));
                stack.push(v);
            }
        }
    }
    assert!(
        visited.iter().all(|&v| v),
        "cannot serialize a disconnected graph"
    );

    let mut out = String::new();
    write_atom(g, &children, &ring_digits, 0, &mut out);
    out
}

fn write_atom(
    g: &MolecularGraph,
    children: &[Vec<(usize, BondOrder)>],
    ring_digits: &[Vec<(u16, BondOrder, bool)>],
    u: usize,
    out: &mut String,
) {
    out.push_str(&atom_token(&g.atoms[u]));
    for &(digit, order, opener) in &ring_digits[u] {
        if opener {
            out.push(bond_symbol(order));
        }
        if digit < 10 {
            out.push((b'0' + digit as u8) as char);
        } else {
            out.push('%');
            out.push_str(&format!("{digit:02}"));
        }
    }
    let kids = &children[u];
    for (i, &(v, order)) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        if !last {
            out.push('(');
        }
        out.push(bond_symbol(order));
        write_atom(g, children, ring_digits, v, out);
        if !last {
            out.push(')');
        }
    }
}

/// Every bond is spelled explicitly: redundant for parser defaults but
/// unambiguous regardless of the aromaticity of either endpoint.
fn bond_symbol(order: BondOrder) -> char {
    match order {
        BondOrder::Single => '-',
        BondOrder::Double => '=',
        BondOrder::Triple => '#',
        BondOrder::Aromatic => ':',
    }
}

fn atom_token(a: &Atom) -> String {
    let bare_ok = a.charge == 0
        && if a.aromatic {
            matches!(a.symbol.as_str(), "B" | "C" | "N" | "O" | "P" | "S")
        } else {
            matches!(
                a.symbol.as_str(),
                "B" | "C" | "N" | "O" | "P" | "S" | "F" | "Cl" | "Br" | "I"
            )
        };
    let body = if a.aromatic {
        a.symbol.to_lowercase()
    } else {
        a.symbol.clone()
    };
    if bare_ok {
        body
    } else {
        let charge = match a.charge {
            0 => String::new(),
            1 => "+".into(),
            -1 => "-".into(),
            c if c > 0 => format!("+{c}"),
            c => format!("{c}"),
        };
        format!("[{body}{charge}]")
    }
}
