//! Built-in experiments, one per acceptance criterion.

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug)]
pub struct CatalogEntry {
    pub id: &'static str,
    pub criterion: u32,
    pub description: &'static str,
    pub toml: &'static str,
}

impl CatalogEntry {
    pub fn config(&self) -> ExperimentConfig {
        ExperimentConfig::from_toml(self.toml).expect("catalog configs parse")
    }
}

macro_rules! entry {
    ($id:literal, $crit:literal, $desc:literal) => {
        CatalogEntry {
            id: $id,
            criterion: $crit,
            description: $desc,
            toml: include_str!(concat!("../experiments/", $id, ".toml")),
        }
    };
}

const CATALOG: &[CatalogEntry] = &[
    entry!("quadratic-oracle", 1, "g = |z|^2/2, xi = sin(B_1): Y_0 against the Cole-Hopf oracle"),
    entry!("linear-oracle", 2, "g = y, xi = B_1^2: Y_0 against e^{-1}"),
    entry!("conjugate-identity", 3, "z-conjugate of |z|^2/2 equals q^2/2 on [-10, 10]"),
    entry!("joint-conjugate-domain", 4, "joint conjugate of |y| + |z|^2/2 is finite exactly for |r| <= 1"),
    entry!("example-3-1-i-assumptions", 5, "assumption probes for the sqrt/-y^2 driver"),
    entry!("example-3-1-ii-assumptions", 5, "assumption probes for the exponential/cubic driver"),
    entry!("example-3-1-iii-assumptions", 5, "assumption probes for the shifted sqrt/cubic driver"),
    entry!("thm-4-1-dual-gap", 6, "dual search over constant, feedback and extracted controls"),
    entry!("comparison-shift", 7, "xi - 0.5 against xi under |z|^2/2: ordering and oracles"),
    entry!("thm-5-2-gn-ladder", 8, "inf-convolution ladder n = 1, 2, 4, 8 on |z|^2/2"),
    entry!("weight-machinery", 9, "Doleans exponential mean and entropy identity for q = 1 and q = Z"),
    entry!("psi-pointwise-bound", 10, "exp(2 Y_0^+) against E[psi(T, xi^+)] for |z|^2/2"),
    entry!("monotone-refinement", 11, "non-Lipschitz solve with xi = sin(B_1) - 1 under grid refinement"),
    entry!("determinism", 12, "small all-stage run for byte-identical reruns"),
];

pub fn list_experiments() -> &'static [CatalogEntry] {
    CATALOG
}

pub fn find(id: &str) -> Result<&'static CatalogEntry, CliError> {
    CATALOG
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| CliError::Validation(format!("unknown experiment `{id}`; see `qbsde list`")))
}
