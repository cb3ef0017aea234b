use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of edges in a 4-node densely connected cell.
pub const NUM_EDGES: usize = 6;
/// Number of candidate operators per edge.
pub const NUM_OPS: usize = 5;
/// `NUM_OPS ^ NUM_EDGES`.
pub const SPACE_SIZE: usize = 15625;

/// Candidate operator on a cell edge. The discriminant is the text id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum CellOp {
    Zeroize = 0,
    SkipConnect = 1,
    Conv1x1 = 2,
    Conv3x3 = 3,
    AvgPool3x3 = 4,
}

impl CellOp {
    pub const ALL: [CellOp; NUM_OPS] = [
        CellOp::Zeroize,
        CellOp::SkipConnect,
        CellOp::Conv1x1,
        CellOp::Conv3x3,
        CellOp::AvgPool3x3,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<CellOp> {
        CellOp::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellOp::Zeroize => "none",
            CellOp::SkipConnect => "skip_connect",
            CellOp::Conv1x1 => "nor_conv_1x1",
            CellOp::Conv3x3 => "nor_conv_3x3",
            CellOp::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    /// Kernel size for parametric ops.
    pub fn kernel(self) -> Option<usize> {
        match self {
            CellOp::Conv1x1 => Some(1),
            CellOp::Conv3x3 => Some(3),
            _ => None,
        }
    }
}

impl From<CellOp> for u8 {
    fn from(op: CellOp) -> u8 {
        op.id()
    }
}

impl TryFrom<u8> for CellOp {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        CellOp::from_id(v).ok_or_else(|| format!("operator id {v} out of range 0..=4"))
    }
}

/// Accepts a numeric id or an operator name.
impl FromStr for CellOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        s.parse::<u8>()
            .ok()
            .and_then(CellOp::from_id)
            .or_else(|| CellOp::ALL.into_iter().find(|op| op.name() == s))
            .ok_or_else(|| Error::Config(format!("unknown operator `{s}`")))
    }
}

/// `(from, to)` node pair of each edge, in genotype order.
pub const EDGE_NODES: [(usize, usize); NUM_EDGES] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// One architecture: an operator for each of the six cell edges, ordered
/// `1←0, 2←0, 2←1, 3←0, 3←1, 3←2`.
///
/// Text form is `"a|b|c|d|e|f"` with operator ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct CellGenotype {
    edge_ops: [CellOp; NUM_EDGES],
}

impl CellGenotype {
    pub fn new(edge_ops: [CellOp; NUM_EDGES]) -> Self {
        CellGenotype { edge_ops }
    }

    pub fn uniform(op: CellOp) -> Self {
        CellGenotype {
            edge_ops: [op; NUM_EDGES],
        }
    }

    pub fn ops(&self) -> &[CellOp; NUM_EDGES] {
        &self.edge_ops
    }

    pub fn op(&self, edge: usize) -> CellOp {
        self.edge_ops[edge]
    }

    pub fn with_op(mut self, edge: usize, op: CellOp) -> Self {
        self.edge_ops[edge] = op;
        self
    }

    /// Position in lexicographic order (edge 0 most significant).
    pub fn index(&self) -> usize {
        self.edge_ops
            .iter()
            .fold(0, |acc, op| acc * NUM_OPS + op.id() as usize)
    }

    pub fn from_index(mut index: usize) -> Option<Self> {
        if index >= SPACE_SIZE {
            return None;
        }
        let mut ops = [CellOp::Zeroize; NUM_EDGES];
        for slot in ops.iter_mut().rev() {
            *slot = CellOp::ALL[index % NUM_OPS];
            index /= NUM_OPS;
        }
        Some(CellGenotype { edge_ops: ops })
    }

    /// NAS-Bench-201 style string, e.g. `|nor_conv_3x3~0|+|none~0|skip_connect~1|+|...|`.
    pub fn arch_str(&self) -> String {
        let mut s = String::new();
        for to in 1..4 {
            if to > 1 {
                s.push('+');
            }
            s.push('|');
            for (e, &(from, t)) in EDGE_NODES.iter().enumerate() {
                if t == to {
                    s.push_str(&format!("{}~{}|", self.edge_ops[e].name(), from));
                }
            }
        }
        s
    }
}

impl fmt::Display for CellGenotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.edge_ops.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{}", op.id())?;
        }
        Ok(())
    }
}

impl FromStr for CellGenotype {
    type Err = Error;

    /// Fields are numbered from 1 in errors.
    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.trim().split('|').collect();
        if fields.len() != NUM_EDGES {
            return Err(Error::GenotypeParse {
                field: fields.len().min(NUM_EDGES + 1),
                detail: format!("expected {NUM_EDGES} `|`-separated fields in `{s}`, got {}", fields.len()),
            });
        }
        let mut ops = [CellOp::Zeroize; NUM_EDGES];
        for (i, field) in fields.iter().enumerate() {
            let op = field
                .trim()
                .parse::<u8>()
                .ok()
                .and_then(CellOp::from_id)
                .ok_or_else(|| Error::GenotypeParse {
                    field: i + 1,
                    detail: format!("`{field}` is not an operator id in 0..=4"),
                })?;
            ops[i] = op;
        }
        Ok(CellGenotype { edge_ops: ops })
    }
}

impl From<CellGenotype> for String {
    fn from(g: CellGenotype) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for CellGenotype {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Iterates the whole space in lexicographic order.
pub fn all_genotypes() -> impl Iterator<Item = CellGenotype> {
    (0..SPACE_SIZE).map(|i| CellGenotype::from_index(i).expect("in range"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_reports_offending_field() {
        let err = "7|0|0|0|0|0".parse::<CellGenotype>().unwrap_err();
        assert!(matches!(err, Error::GenotypeParse { field: 1, .. }), "{err}");
        let err = "0|0|0|x|0|0".parse::<CellGenotype>().unwrap_err();
        assert!(matches!(err, Error::GenotypeParse { field: 4, .. }), "{err}");
        assert!("0|0|0|0|0".parse::<CellGenotype>().is_err());
    }

    #[test]
    fn lexicographic_order_matches_index() {
        let all: Vec<_> = all_genotypes().collect();
        assert_eq!(all.len(), SPACE_SIZE);
        assert_eq!(all[0], CellGenotype::uniform(CellOp::Zeroize));
        assert_eq!(all[SPACE_SIZE - 1], CellGenotype::uniform(CellOp::AvgPool3x3));
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert!(all.windows(2).all(|w| w[0].to_string() < w[1].to_string()));
    }

    #[test]
    fn arch_string_layout() {
        let g: CellGenotype = "3|0|1|2|4|3".parse().unwrap();
        assert_eq!(
            g.arch_str(),
            "|nor_conv_3x3~0|+|none~0|skip_connect~1|+|nor_conv_1x1~0|avg_pool_3x3~1|nor_conv_3x3~2|"
        );
    }

    proptest! {
        #[test]
        fn text_form_round_trips(index in 0usize..SPACE_SIZE) {
            let g = CellGenotype::from_index(index).unwrap();
            let parsed: CellGenotype = g.to_string().parse().unwrap();
            prop_assert_eq!(parsed, g);
            prop_assert_eq!(parsed.index(), index);
        }
    }
}
