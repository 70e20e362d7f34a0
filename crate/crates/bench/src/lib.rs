//! Fixtures shared by the criterion benches.

use ttsa_core::{ProblemConfig, ProblemSpec, StepSchedule};

const LINEAR4: &str = include_str!("../../../configs/problems/linear4.toml");
const GTD3: &str = include_str!("../../../configs/problems/gtd3.toml");
const ROBUST_PR10: &str = include_str!("../../../configs/problems/robust_pr10.toml");

fn build(text: &str) -> ProblemSpec {
    ProblemConfig::from_toml_str(text)
        .and_then(|c| c.build())
        .expect("shipped config builds")
}

/// Canonical linear instance: d = 2, 4-state noise chain.
pub fn linear4() -> ProblemSpec {
    build(LINEAR4)
}

pub fn gtd3() -> ProblemSpec {
    build(GTD3)
}

pub fn robust_pr10() -> ProblemSpec {
    build(ROBUST_PR10)
}

/// Schedule used with [`linear4`] in the shipped configs.
pub fn linear_schedule() -> StepSchedule {
    StepSchedule::new(2.5, 1.5)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_build() {
        assert_eq!(super::linear4().dx, 2);
        assert_eq!(super::gtd3().dy, 2);
        assert_eq!(super::robust_pr10().dx, 10);
    }
}
