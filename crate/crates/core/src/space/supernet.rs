use std::fmt;

use serde::{Deserialize, Serialize};

use super::genotype::{CellGenotype, CellOp, NUM_EDGES, NUM_OPS};
use super::network::Network;
use super::MacroConfig;
use crate::error::{Error, Result};
use crate::tensor::{InitScheme, Scalar};

/// Edge × operator activity mask. Operators can be pruned but never
/// re-activated, and every edge keeps at least one operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupernetState {
    active: [[bool; NUM_OPS]; NUM_EDGES],
}

impl SupernetState {
    /// Every edge carries all of `ops`.
    pub fn with_ops(ops: &[CellOp]) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Config("supernet needs at least one operator".into()));
        }
        let mut row = [false; NUM_OPS];
        for &op in ops {
            row[op.id() as usize] = true;
        }
        Ok(SupernetState {
            active: [row; NUM_EDGES],
        })
    }

    pub fn full() -> Self {
        Self::with_ops(&CellOp::ALL).expect("non-empty")
    }

    pub fn from_genotype(g: &CellGenotype) -> Self {
        let mut active = [[false; NUM_OPS]; NUM_EDGES];
        for (e, op) in g.ops().iter().enumerate() {
            active[e][op.id() as usize] = true;
        }
        SupernetState { active }
    }

    pub fn is_active(&self, edge: usize, op: CellOp) -> bool {
        self.active[edge][op.id() as usize]
    }

    pub fn active_ops(&self, edge: usize) -> Vec<CellOp> {
        CellOp::ALL
            .into_iter()
            .filter(|&op| self.is_active(edge, op))
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().flatten().filter(|&&a| a).count()
    }

    pub fn is_fully_pruned(&self) -> bool {
        (0..NUM_EDGES).all(|e| self.active_ops(e).len() == 1)
    }

    pub fn to_genotype(&self) -> Option<CellGenotype> {
        if !self.is_fully_pruned() {
            return None;
        }
        let mut ops = [CellOp::Zeroize; NUM_EDGES];
        for (e, slot) in ops.iter_mut().enumerate() {
            *slot = self.active_ops(e)[0];
        }
        Some(CellGenotype::new(ops))
    }

    /// Every `(edge, op)` whose removal keeps the mask valid.
    pub fn removable(&self) -> Vec<(usize, CellOp)> {
        (0..NUM_EDGES)
            .flat_map(|e| {
                let ops = self.active_ops(e);
                let keep = ops.len() >= 2;
                ops.into_iter().filter(move |_| keep).map(move |op| (e, op))
            })
            .collect()
    }

    /// Operators cannot be restored once pruned.
    pub fn reactivate(&self, edge: usize, op: CellOp) -> Result<Self> {
        Err(Error::Contract(format!(
            "cannot re-activate {} on edge {edge}: supernet masks only shrink",
            op.name()
        )))
    }
}

impl fmt::Display for SupernetState {
    /// Edges separated by `|`, active operator ids concatenated: `0134|...`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in 0..NUM_EDGES {
            if e > 0 {
                f.write_str("|")?;
            }
            for op in self.active_ops(e) {
                write!(f, "{}", op.id())?;
            }
        }
        Ok(())
    }
}

/// Clears `(edge, op)`.
pub fn prune_operator(state: &SupernetState, edge: usize, op: CellOp) -> Result<SupernetState> {
    if edge >= NUM_EDGES {
        return Err(Error::Contract(format!("edge {edge} out of range")));
    }
    if !state.is_active(edge, op) {
        return Err(Error::Contract(format!("{} on edge {edge} is not active", op.name())));
    }
    if state.active_ops(edge).len() < 2 {
        return Err(Error::Contract(format!(
            "{} is the last operator on edge {edge}",
            op.name()
        )));
    }
    let mut next = *state;
    next.active[edge][op.id() as usize] = false;
    Ok(next)
}

/// A network holding every operator on every edge.
pub fn build_supernet<T: Scalar>(macro_cfg: &MacroConfig, seed: u64) -> Result<(Network<T>, SupernetState)> {
    let state = SupernetState::full();
    let net = Network::with_state(state, macro_cfg, seed, InitScheme::default())?;
    Ok((net, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_four_prunes_reach_a_genotype() {
        let mut s = SupernetState::full();
        assert_eq!(s.active_count(), 30);
        for _ in 0..24 {
            let (e, op) = s.removable()[0];
            s = prune_operator(&s, e, op).unwrap();
        }
        assert!(s.is_fully_pruned());
        assert!(s.removable().is_empty());
        let g = s.to_genotype().unwrap();
        assert_eq!(g.to_string().parse::<CellGenotype>().unwrap(), g);
    }

    #[test]
    fn cannot_prune_last_or_inactive() {
        let g: CellGenotype = "1|2|3|4|0|1".parse().unwrap();
        let s = SupernetState::from_genotype(&g);
        assert!(matches!(prune_operator(&s, 0, CellOp::SkipConnect), Err(Error::Contract(_))));
        let full = SupernetState::full();
        let pruned = prune_operator(&full, 3, CellOp::Conv1x1).unwrap();
        assert!(prune_operator(&pruned, 3, CellOp::Conv1x1).is_err());
        assert!(pruned.reactivate(3, CellOp::Conv1x1).is_err());
    }

    #[test]
    fn display_lists_active_ids() {
        let s = SupernetState::with_ops(&[CellOp::SkipConnect, CellOp::Conv3x3]).unwrap();
        assert_eq!(s.to_string(), "13|13|13|13|13|13");
    }
}
