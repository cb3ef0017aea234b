//! The cell search space: genotypes, macro skeleton, parameter counting,
//! networks and the pruning supernet.

mod genotype;
mod network;
mod supernet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use genotype::{all_genotypes, CellGenotype, CellOp, EDGE_NODES, NUM_EDGES, NUM_OPS, SPACE_SIZE};
pub use network::{ForwardOutput, Network};
pub use supernet::{build_supernet, prune_operator, SupernetState};

/// BatchNorm epsilon used throughout (affine BN, NAS-Bench-201 default).
pub const BN_EPS: f64 = 1e-5;

/// Macro skeleton: stem, `num_stages` stages of cells separated by
/// stride-2 residual reduction blocks, then BN-ReLU, global pooling and a
/// linear classifier. Stage `s` (0-based) runs at `stem_channels · 2^s`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub stem_channels: usize,
    pub cells_per_stage: usize,
    pub num_stages: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub input_channels: usize,
}

impl Default for MacroConfig {
    fn default() -> Self {
        MacroConfig {
            stem_channels: 16,
            cells_per_stage: 1,
            num_stages: 3,
            num_classes: 10,
            input_resolution: 32,
            input_channels: 3,
        }
    }
}

impl MacroConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("macro config: {m}")));
        if self.stem_channels < 4 || self.stem_channels % 2 != 0 {
            return bad("stem_channels must be even and >= 4");
        }
        if self.cells_per_stage == 0 {
            return bad("cells_per_stage must be >= 1");
        }
        if !(1..=3).contains(&self.num_stages) {
            return bad("num_stages must be in 1..=3");
        }
        if self.input_resolution == 0 || self.input_resolution % 4 != 0 {
            return bad("input_resolution must be a positive multiple of 4");
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return bad("num_classes and input_channels must be >= 1");
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }

    pub fn final_channels(&self) -> usize {
        self.stage_channels(self.num_stages - 1)
    }
}

/// Trainable scalars contributed by one edge operator at width `c`
/// (ReLU-Conv-BN for convolutions, nothing otherwise).
pub fn op_param_count(op: CellOp, c: usize) -> usize {
    match op.kernel() {
        Some(k) => k * k * c * c + 2 * c,
        None => 0,
    }
}

/// Exact #Param of `genotype` under `macro_cfg`, computed from layer shapes
/// without building the network.
pub fn count_params(genotype: &CellGenotype, macro_cfg: &MacroConfig) -> usize {
    count_state_params(&SupernetState::from_genotype(genotype), macro_cfg)
}

/// #Param of a supernet: every active operator contributes.
pub fn count_state_params(state: &SupernetState, macro_cfg: &MacroConfig) -> usize {
    let c0 = macro_cfg.stem_channels;
    let mut total = 9 * macro_cfg.input_channels * c0 + 2 * c0;
    for stage in 0..macro_cfg.num_stages {
        let c = macro_cfg.stage_channels(stage);
        if stage > 0 {
            let cin = c / 2;
            // conv_a (3x3, stride 2) + BN, conv_b (3x3) + BN, 1x1 shortcut
            total += 9 * cin * c + 2 * c + 9 * c * c + 2 * c + cin * c;
        }
        let per_cell: usize = (0..NUM_EDGES)
            .flat_map(|e| state.active_ops(e))
            .map(|op| op_param_count(op, c))
            .sum();
        total += macro_cfg.cells_per_stage * per_cell;
    }
    let cf = macro_cfg.final_channels();
    total + 2 * cf + cf * macro_cfg.num_classes + macro_cfg.num_classes
}

/// Lexicographic enumeration, optionally restricted to one #Param value.
pub fn enumerate_space(
    macro_cfg: &MacroConfig,
    param_filter: Option<usize>,
) -> impl Iterator<Item = CellGenotype> + '_ {
    all_genotypes().filter(move |g| param_filter.is_none_or(|p| count_params(g, macro_cfg) == p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_genotypes_share_a_count() {
        let m = MacroConfig::default();
        let zero = count_params(&CellGenotype::uniform(CellOp::Zeroize), &m);
        assert_eq!(zero, count_params(&CellGenotype::uniform(CellOp::SkipConnect), &m));
        assert_eq!(zero, count_params(&CellGenotype::uniform(CellOp::AvgPool3x3), &m));
        let group: Vec<_> = enumerate_space(&m, Some(zero)).collect();
        assert!(group.contains(&CellGenotype::uniform(CellOp::Zeroize)));
        assert!(group.contains(&CellGenotype::uniform(CellOp::SkipConnect)));
        assert_eq!(group.len(), 3usize.pow(6));
    }

    #[test]
    fn conv_swap_changes_count_by_8c2() {
        let m = MacroConfig {
            cells_per_stage: 1,
            num_stages: 1,
            ..MacroConfig::default()
        };
        let c = m.stem_channels;
        let g = CellGenotype::uniform(CellOp::Conv3x3);
        let swapped = g.with_op(2, CellOp::Conv1x1);
        assert_eq!(count_params(&g, &m) - count_params(&swapped, &m), 8 * c * c);
    }

    #[test]
    fn op_upgrades_are_monotone() {
        let m = MacroConfig::default();
        let base = CellGenotype::uniform(CellOp::Zeroize);
        for edge in 0..NUM_EDGES {
            let counts: Vec<usize> = [CellOp::Zeroize, CellOp::SkipConnect, CellOp::AvgPool3x3, CellOp::Conv1x1, CellOp::Conv3x3]
                .iter()
                .map(|&op| count_params(&base.with_op(edge, op), &m))
                .collect();
            assert_eq!(counts[0], counts[1]);
            assert_eq!(counts[1], counts[2]);
            assert!(counts[2] < counts[3] && counts[3] < counts[4]);
        }
    }

    #[test]
    fn validation() {
        assert!(MacroConfig::default().validate().is_ok());
        for bad in [
            MacroConfig { stem_channels: 5, ..Default::default() },
            MacroConfig { stem_channels: 2, ..Default::default() },
            MacroConfig { cells_per_stage: 0, ..Default::default() },
            MacroConfig { input_resolution: 30, ..Default::default() },
            MacroConfig { num_stages: 4, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
