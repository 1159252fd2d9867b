use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopScheme {
    Sca,
    Dca,
    PolaDca,
}

/// Per-layer FLOP model for `n` nodes of width `d`: SCA `2n²D`, DCA
/// `2nD² + 2n²D`, PolaDCA `2nD² + 2n²D + 4nD`.
pub fn flop_count(scheme: FlopScheme, n: u64, d: u64) -> u64 {
    let attention = 2 * n * n * d;
    match scheme {
        FlopScheme::Sca => attention,
        FlopScheme::Dca => 2 * n * d * d + attention,
        FlopScheme::PolaDca => 2 * n * d * d + attention + 4 * n * d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(flop_count(FlopScheme::Sca, 10, 64), 12_800);
        assert_eq!(flop_count(FlopScheme::Dca, 10, 64), 94_720);
        assert_eq!(flop_count(FlopScheme::PolaDca, 10, 64), 97_280);
    }
}
