//! System model: configuration, unit handling and user clustering.
//!
//! A scenario is a downlink with an `M`-antenna base station serving
//! `N * K` single-antenna users, grouped into `N` clusters of `K` users.
//! Clustering and in-cluster ordering depend only on the large-scale channel
//!-to-noise ratio `cnr = d^{-α} / σ²`: the strongest `N` users become the
//! heads (`k = 1`) of clusters `1..N` in descending order, the next `N`
//! users fill position `k = 2`, and so on. This guarantees both ordering
//! invariants: heads dominate within each cluster, and cluster `n` dominates
//! cluster `n+1` position by position.
//!
//! Configurations are read from TOML. Powers are given in dBm and converted
//! to linear milliwatts once, at the boundary; everything downstream is
//! linear.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Configuration / validation errors. Messages carry the offending field.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to read configuration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Convert a dBm quantity to linear milliwatts.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// Convert linear milliwatts to dBm.
pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// How the channel-direction quantization is realized in simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizationModel {
    /// Exact random vector quantization: draw all `2^B` codewords and pick
    /// the best. Cost grows as `2^B`; use for moderate bit budgets.
    ExactRvq,
    /// Sample the quantization-cell statistics directly
    /// (`sin²θ = δ·Y/(X+Y)`), avoiding the exponential codebook cost.
    #[default]
    CellModel,
    /// No quantization error (perfect CSI at the transmitter).
    Perfect,
}

/// Raw system configuration as found in a TOML file (angles in dBm).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of base-station antennas `M`.
    pub antennas: usize,
    /// Number of clusters `N`.
    pub clusters: usize,
    /// Users per cluster `K`.
    pub users_per_cluster: usize,
    /// Total transmit power in dBm.
    pub power_dbm: f64,
    /// Total feedback budget `B` in bits.
    pub feedback_bits: f64,
    /// Path-loss exponent α.
    pub path_loss_exponent: f64,
    /// User distances in meters, one row per cluster slot (row-major
    /// `N x K`); the rows describe the user population before clustering.
    pub distances_m: Vec<Vec<f64>>,
    /// Per-user noise power in dBm, same shape as `distances_m`.
    pub noise_dbm: Vec<Vec<f64>>,
    /// Monte Carlo trial count.
    #[serde(default = "default_trials")]
    pub trials: u64,
    /// Monte Carlo base seed.
    #[serde(default)]
    pub seed: u64,
    /// Quantization realization used in simulation.
    #[serde(default)]
    pub quantization: QuantizationModel,
}

fn default_trials() -> u64 {
    200_000
}

impl SystemConfig {
    /// Parse from a TOML string.
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: SystemConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a TOML file.
    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Semantic validation beyond what the TOML grammar enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (m, n, k) = (self.antennas, self.clusters, self.users_per_cluster);
        if m < 2 {
            return Err(invalid("antennas", format!("M = {m}, need M >= 2")));
        }
        if n == 0 {
            return Err(invalid("clusters", "N must be positive"));
        }
        if k == 0 {
            return Err(invalid("users_per_cluster", "K must be positive"));
        }
        if m <= (n - 1) * k {
            return Err(invalid(
                "antennas",
                format!(
                    "zero-forcing needs M > (N-1)K; got M = {m}, (N-1)K = {}",
                    (n - 1) * k
                ),
            ));
        }
        if !(self.feedback_bits >= 0.0) {
            return Err(invalid("feedback_bits", "B must be non-negative"));
        }
        if !(self.path_loss_exponent > 0.0) || self.path_loss_exponent > 8.0 {
            return Err(invalid(
                "path_loss_exponent",
                format!("alpha = {} outside (0, 8]", self.path_loss_exponent),
            ));
        }
        if !self.power_dbm.is_finite() {
            return Err(invalid("power_dbm", "must be finite"));
        }
        let check_shape = |field: &'static str, rows: &Vec<Vec<f64>>| {
            if rows.len() != n || rows.iter().any(|r| r.len() != k) {
                return Err(invalid(
                    field,
                    format!("expected {n} rows of {k} entries (N x K)"),
                ));
            }
            Ok(())
        };
        check_shape("distances_m", &self.distances_m)?;
        check_shape("noise_dbm", &self.noise_dbm)?;
        for row in &self.distances_m {
            for &d in row {
                if !(d > 0.0) || !d.is_finite() {
                    return Err(invalid("distances_m", format!("distance {d} must be > 0")));
                }
            }
        }
        for row in &self.noise_dbm {
            for &v in row {
                if !v.is_finite() {
                    return Err(invalid("noise_dbm", format!("noise {v} must be finite")));
                }
            }
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be positive"));
        }
        Ok(())
    }

    /// Cluster the configured user population.
    pub fn scenario(&self) -> Result<ClusteredScenario, ConfigError> {
        self.validate()?;
        let mut users = Vec::new();
        for (r, row) in self.distances_m.iter().enumerate() {
            for (c, &d) in row.iter().enumerate() {
                users.push(UserLink {
                    distance_m: d,
                    noise_mw: dbm_to_mw(self.noise_dbm[r][c]),
                });
            }
        }
        Ok(cluster_users(
            &users,
            self.antennas,
            self.clusters,
            self.users_per_cluster,
            self.path_loss_exponent,
            dbm_to_mw(self.power_dbm),
            self.feedback_bits,
        ))
    }
}

/// Large-scale description of one user link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserLink {
    pub distance_m: f64,
    pub noise_mw: f64,
}

impl UserLink {
    /// Channel-to-noise ratio `d^{-α} / σ²` (1/mW).
    pub fn cnr(&self, alpha: f64) -> f64 {
        self.distance_m.powf(-alpha) / self.noise_mw
    }
}

/// A clustered, ordered scenario: everything the analysis and simulation
/// layers need, in linear units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusteredScenario {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub p_total_mw: f64,
    pub b_total: f64,
    /// Users indexed `[cluster][position]`, position 0 is the cluster head.
    pub users: Vec<Vec<UserLink>>,
    /// Large-scale CNR `d^{-α}/σ²`, same indexing.
    pub cnr: Vec<Vec<f64>>,
    /// Index of each user in the original (pre-clustering) population.
    pub user_ids: Vec<Vec<usize>>,
}

impl ClusteredScenario {
    /// Effective noise `1/cnr` in mW for user (n, k) (zero-based indices).
    pub fn effective_noise_mw(&self, n: usize, k: usize) -> f64 {
        1.0 / self.cnr[n][k]
    }

    /// Geometric mean of all CNRs (the constant `G` of the power allocator).
    pub fn cnr_geometric_mean(&self) -> f64 {
        let nk = (self.n * self.k) as f64;
        let s: f64 = self.cnr.iter().flatten().map(|c| c.ln()).sum();
        (s / nk).exp()
    }

    /// Head-noise imbalance `Δ_n = Σ_{i≠n} (w_{n,1} - w_{i,1})` with
    /// `w = 1/cnr`; sums to zero over clusters.
    pub fn head_noise_imbalance(&self, n: usize) -> f64 {
        let w_n = 1.0 / self.cnr[n][0];
        (0..self.n)
            .filter(|&i| i != n)
            .map(|i| w_n - 1.0 / self.cnr[i][0])
            .sum()
    }

    /// Swap the users at `column` according to `perm` (cluster `n` receives
    /// the user previously held by cluster `perm[n]`). Used to explore
    /// alternative clusterings; the result intentionally does not re-sort.
    pub fn exchange_clustering(&self, perm: &[usize], column: usize) -> Self {
        assert_eq!(perm.len(), self.n, "permutation must cover all clusters");
        assert!(column < self.k, "column out of range");
        let mut out = self.clone();
        for n in 0..self.n {
            out.users[n][column] = self.users[perm[n]][column];
            out.cnr[n][column] = self.cnr[perm[n]][column];
            out.user_ids[n][column] = self.user_ids[perm[n]][column];
        }
        out
    }
}

/// Cluster `n * k` users by large-scale CNR.
///
/// Users are sorted by descending CNR (ties broken toward the lower original
/// index) and filled column-major: ranks `1..=N` become the cluster heads,
/// ranks `N+1..=2N` position 2, and so on.
pub fn cluster_users(
    users: &[UserLink],
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    p_total_mw: f64,
    b_total: f64,
) -> ClusteredScenario {
    assert_eq!(users.len(), n * k, "need exactly N*K users");
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| {
        users[b]
            .cnr(alpha)
            .partial_cmp(&users[a].cnr(alpha))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut scen = ClusteredScenario {
        m,
        n,
        k,
        alpha,
        p_total_mw,
        b_total,
        users: vec![vec![UserLink { distance_m: 0.0, noise_mw: 0.0 }; k]; n],
        cnr: vec![vec![0.0; k]; n],
        user_ids: vec![vec![0; k]; n],
    };
    for (rank, &id) in order.iter().enumerate() {
        let col = rank / n;
        let row = rank % n;
        scen.users[row][col] = users[id];
        scen.cnr[row][col] = users[id].cnr(alpha);
        scen.user_ids[row][col] = id;
    }
    scen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_config(distances: [[f64; 2]; 3]) -> SystemConfig {
        SystemConfig {
            antennas: 6,
            clusters: 3,
            users_per_cluster: 2,
            power_dbm: 20.0,
            feedback_bits: 42.0,
            path_loss_exponent: 4.0,
            distances_m: distances.iter().map(|r| r.to_vec()).collect(),
            noise_dbm: vec![vec![-50.0; 2]; 3],
            trials: 1000,
            seed: 7,
            quantization: QuantizationModel::CellModel,
        }
    }

    #[test]
    fn unit_conversions_round_trip() {
        assert!((dbm_to_mw(-50.0) - 1e-5).abs() < 1e-20);
        assert!((dbm_to_mw(0.0) - 1.0).abs() < 1e-15);
        for &x in &[-50.0, 0.0, 17.5, 30.0] {
            assert!((mw_to_dbm(dbm_to_mw(x)) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_orders_heads_and_columns() {
        let cfg = paper_config([[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]);
        let scen = cfg.scenario().unwrap();
        // Ordering invariants: within a cluster CNR decreases with position,
        // and at each position CNR decreases with cluster index.
        for n in 0..3 {
            for k in 1..2 {
                assert!(scen.cnr[n][k - 1] >= scen.cnr[n][k]);
            }
        }
        for k in 0..2 {
            for n in 1..3 {
                assert!(scen.cnr[n - 1][k] >= scen.cnr[n][k]);
            }
        }
        // With equal noise the nearest user (25 m) heads cluster 1.
        assert_eq!(scen.users[0][0].distance_m, 25.0);
        assert_eq!(scen.users[2][1].distance_m, 39.0);
    }

    #[test]
    fn clustering_tie_break_is_stable() {
        let users = vec![
            UserLink { distance_m: 10.0, noise_mw: 1e-5 };
            4
        ];
        let scen = cluster_users(&users, 6, 2, 2, 4.0, 1.0, 8.0);
        // All CNRs equal: original order preserved column-major.
        assert_eq!(scen.user_ids[0][0], 0);
        assert_eq!(scen.user_ids[1][0], 1);
        assert_eq!(scen.user_ids[0][1], 2);
        assert_eq!(scen.user_ids[1][1], 3);
    }

    #[test]
    fn validation_rejects_bad_dimensions() {
        let mut cfg = paper_config([[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]);
        cfg.antennas = 4; // needs M > (N-1)K = 4
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::Invalid { field: "antennas", .. })
        ));
        let mut cfg = paper_config([[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]);
        cfg.distances_m[1] = vec![27.0];
        assert!(cfg.validate().is_err());
        let mut cfg = paper_config([[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]);
        cfg.distances_m[0][0] = -3.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_field() {
        let text = r#"
            antennas = 6
            clusters = 3
            users_per_cluster = 2
            power_dbm = 20.0
            feedback_bits = 42.0
            path_loss_exponent = 4.0
            distances_m = [[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]
            noise_dbm = [[-50.0, -50.0], [-50.0, -50.0], [-50.0, -50.0]]
            trials = 5000
            seed = 3
            quantization = "exact-rvq"
        "#;
        let cfg = SystemConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.quantization, QuantizationModel::ExactRvq);
        assert_eq!(cfg.trials, 5000);
        let bad = text.replace("seed = 3", "sed = 3");
        assert!(SystemConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn exchange_clustering_permutes_one_column() {
        let cfg = paper_config([[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]);
        let scen = cfg.scenario().unwrap();
        let swapped = scen.exchange_clustering(&[1, 0, 2], 1);
        assert_eq!(swapped.users[0][1].distance_m, scen.users[1][1].distance_m);
        assert_eq!(swapped.users[1][1].distance_m, scen.users[0][1].distance_m);
        // Heads untouched.
        assert_eq!(swapped.users[0][0].distance_m, scen.users[0][0].distance_m);
    }

    #[test]
    fn imbalance_sums_to_zero() {
        let cfg = paper_config([[25.0, 35.0], [27.0, 37.0], [29.0, 39.0]]);
        let scen = cfg.scenario().unwrap();
        let total: f64 = (0..3).map(|n| scen.head_noise_imbalance(n)).sum();
        assert!(total.abs() < 1e-9);
    }
}
