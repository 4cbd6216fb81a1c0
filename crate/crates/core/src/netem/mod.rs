//! Network emulation: link profiles and byte-stream shaping.
//!
//! Each [`LinkProfile`] is a (latency, per-connection bandwidth, aggregate
//! bandwidth) triple. The built-in catalog holds the measured
//! North California links to seven EC2 regions plus `lan` and `identity`.
//! Shaping happens above loopback TCP sockets: a [`Shaper`] is one profile
//! instance whose aggregate token bucket is shared by every channel opened
//! from it, and each channel paces itself at the single-connection rate.
//!
//! Bandwidths are in MB/s with 1 MB = 10^6 bytes.

mod bucket;
mod shaper;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bucket::TokenBucket;
pub use shaper::{
    measure_transfer, open_shaped_channel, sleep_precise, Pacer, ShapedChannel, ShapedEnd, ShapedWriter, Shaper,
    MAX_GRANT, REFILL_PERIOD,
};

pub(crate) const MB: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetemError {
    #[error("unknown profile `{name}`; valid profiles: {}", valid.join(", "))]
    UnknownProfile { name: String, valid: Vec<String> },
    #[error("invalid profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
}

/// Latency and bandwidth of one network path.
#[derive(Clone, PartialEq)]
pub struct LinkProfile {
    name: String,
    latency: Duration,
    single_conn_mbps: f64,
    aggregate_mbps: f64,
    scale: f64,
}

impl LinkProfile {
    pub fn new(
        name: impl Into<String>,
        latency_ms: f64,
        single_conn_mbps: f64,
        aggregate_mbps: f64,
    ) -> Result<Self, NetemError> {
        let p = Self::unchecked(name.into(), latency_ms, single_conn_mbps, aggregate_mbps);
        p.validate()?;
        Ok(p)
    }

    fn unchecked(name: String, latency_ms: f64, single: f64, aggregate: f64) -> Self {
        Self {
            name,
            latency: Duration::from_secs_f64(latency_ms / 1e3),
            single_conn_mbps: single,
            aggregate_mbps: aggregate,
            scale: 1.0,
        }
    }

    fn validate(&self) -> Result<(), NetemError> {
        let invalid = |reason: String| NetemError::InvalidProfile {
            name: self.name.clone(),
            reason,
        };
        if !(self.single_conn_mbps > 0.0) || !(self.aggregate_mbps > 0.0) {
            return Err(invalid("bandwidths must be positive".into()));
        }
        if self.aggregate_mbps < self.single_conn_mbps {
            return Err(invalid(format!(
                "aggregate bandwidth {} MB/s is below single-connection {} MB/s",
                self.aggregate_mbps, self.single_conn_mbps
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(invalid(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// No latency, unlimited bandwidth.
    pub fn identity() -> Self {
        Self::unchecked("identity".into(), 0.0, f64::INFINITY, f64::INFINITY)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// One-way latency; scale does not apply.
    pub fn latency(&self) -> Duration {
        self.latency
    }

    pub fn latency_ms(&self) -> f64 {
        self.latency.as_secs_f64() * 1e3
    }

    /// Nominal (unscaled) per-connection bandwidth in MB/s.
    pub fn single_conn_mbps(&self) -> f64 {
        self.single_conn_mbps
    }

    /// Nominal (unscaled) aggregate bandwidth in MB/s.
    pub fn aggregate_mbps(&self) -> f64 {
        self.aggregate_mbps
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Effective per-connection rate in bytes/s after scaling.
    pub fn single_conn_rate(&self) -> f64 {
        self.single_conn_mbps * MB * self.scale
    }

    /// Effective aggregate rate in bytes/s after scaling.
    pub fn aggregate_rate(&self) -> f64 {
        self.aggregate_mbps * MB * self.scale
    }

    pub fn is_unshaped(&self) -> bool {
        self.latency.is_zero() && self.single_conn_mbps.is_infinite() && self.aggregate_mbps.is_infinite()
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self { scale, ..self.clone() }
    }

    pub fn with_name(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..self.clone()
        }
    }

    /// Profile for reaching object storage from this region: same latency,
    /// and the multi-connection figure as the per-transfer rate since a
    /// store download opens independent connections.
    pub fn store_link(&self) -> Self {
        Self {
            name: format!("store:{}", self.name),
            single_conn_mbps: self.aggregate_mbps,
            ..self.clone()
        }
    }

    /// Saturation point: the smallest connection count reaching the
    /// aggregate cap.
    pub fn saturating_conns(&self) -> u32 {
        if self.single_conn_mbps.is_infinite() {
            return 1;
        }
        (self.aggregate_mbps / self.single_conn_mbps).ceil().max(1.0) as u32
    }
}

impl fmt::Debug for LinkProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "LinkProfile({}: {} ms, {} / {} MB/s, x{})",
            self.name,
            self.latency_ms(),
            self.single_conn_mbps,
            self.aggregate_mbps,
            self.scale
        )
    }
}

#[derive(Serialize)]
struct ProfileRecord<'a> {
    name: &'a str,
    latency_ms: f64,
    single_mbps: Option<f64>,
    aggregate_mbps: Option<f64>,
    scale: f64,
}

impl Serialize for LinkProfile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let finite = |v: f64| v.is_finite().then_some(v);
        ProfileRecord {
            name: &self.name,
            latency_ms: self.latency_ms(),
            single_mbps: finite(self.single_conn_mbps),
            aggregate_mbps: finite(self.aggregate_mbps),
            scale: self.scale,
        }
        .serialize(s)
    }
}

/// `latency + size / min(n_conns * single, aggregate)`, with scaled rates.
///
/// `n_conns` below one is treated as one.
pub fn model_transfer_time(size: u64, profile: &LinkProfile, n_conns: u32) -> Duration {
    let n = n_conns.max(1) as f64;
    let rate = (n * profile.single_conn_rate()).min(profile.aggregate_rate());
    let transfer = if rate.is_infinite() || size == 0 {
        0.0
    } else {
        size as f64 / rate
    };
    profile.latency() + Duration::from_secs_f64(transfer)
}

/// The seven measured region links, fastest first.
pub const REGION_PROFILES: [&str; 7] = [
    "nc-nc",
    "nc-oregon",
    "nc-virginia",
    "nc-hongkong",
    "nc-stockholm",
    "nc-saopaulo",
    "nc-bahrain",
];

/// A `[profiles.<name>]` config section. Fields left out keep the built-in
/// value; a new profile name must set all three rates.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverride {
    pub latency_ms: Option<f64>,
    pub single_mbps: Option<f64>,
    pub aggregate_mbps: Option<f64>,
    pub scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ProfileCatalog {
    profiles: Vec<LinkProfile>,
}

impl Default for ProfileCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ProfileCatalog {
    pub fn builtin() -> Self {
        let rows: [(&str, f64, f64, f64); 8] = [
            // TCP fallback figures for the InfiniBand testbed; 16.8 us
            // latency rounds to 0.017 ms.
            ("lan", 0.017, 1000.0, 5000.0),
            ("nc-nc", 0.44, 592.0, 2946.0),
            ("nc-oregon", 11.0, 133.0, 573.0),
            ("nc-virginia", 32.3, 39.4, 557.0),
            ("nc-hongkong", 83.3, 16.3, 513.0),
            ("nc-stockholm", 90.9, 11.4, 495.0),
            ("nc-saopaulo", 90.9, 8.27, 491.0),
            ("nc-bahrain", 111.0, 6.90, 444.0),
        ];
        let mut profiles = vec![LinkProfile::identity()];
        profiles.extend(
            rows.iter()
                .map(|&(n, l, s, a)| LinkProfile::unchecked(n.into(), l, s, a)),
        );
        Self { profiles }
    }

    pub fn names(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LinkProfile> {
        self.profiles.iter()
    }

    pub fn lookup(&self, name: &str) -> Result<LinkProfile, NetemError> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .cloned()
            .ok_or_else(|| NetemError::UnknownProfile {
                name: name.to_string(),
                valid: self.names(),
            })
    }

    pub fn apply_override(&mut self, name: &str, ov: &ProfileOverride) -> Result<(), NetemError> {
        let existing = self.profiles.iter().position(|p| p.name == name);
        let mut p = match existing {
            Some(i) => self.profiles[i].clone(),
            None => {
                let missing = |field: &str| NetemError::InvalidProfile {
                    name: name.to_string(),
                    reason: format!("new profile must set `{field}`"),
                };
                LinkProfile::unchecked(
                    name.to_string(),
                    ov.latency_ms.ok_or_else(|| missing("latency_ms"))?,
                    ov.single_mbps.ok_or_else(|| missing("single_mbps"))?,
                    ov.aggregate_mbps.ok_or_else(|| missing("aggregate_mbps"))?,
                )
            }
        };
        if let Some(l) = ov.latency_ms {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(NetemError::InvalidProfile {
                    name: name.into(),
                    reason: format!("latency_ms must be a non-negative number, got {l}"),
                });
            }
            p.latency = Duration::from_secs_f64(l / 1e3);
        }
        if let Some(v) = ov.single_mbps {
            p.single_conn_mbps = v;
        }
        if let Some(v) = ov.aggregate_mbps {
            p.aggregate_mbps = v;
        }
        if let Some(v) = ov.scale {
            p.scale = v;
        }
        p.validate()?;
        match existing {
            Some(i) => self.profiles[i] = p,
            None => self.profiles.push(p),
        }
        Ok(())
    }
}

/// Looks `name` up in the built-in catalog.
pub fn lookup(name: &str) -> Result<LinkProfile, NetemError> {
    ProfileCatalog::builtin().lookup(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn secs(d: Duration) -> f64 {
        d.as_secs_f64()
    }

    #[test]
    fn catalog_matches_measured_table() {
        let c = ProfileCatalog::builtin();
        assert_eq!(c.names().len(), 9);
        let b = c.lookup("nc-bahrain").unwrap();
        assert_eq!(
            (b.latency_ms(), b.single_conn_mbps(), b.aggregate_mbps()),
            (111.0, 6.90, 444.0)
        );
        let n = c.lookup("nc-nc").unwrap();
        assert_eq!(
            (n.latency_ms(), n.single_conn_mbps(), n.aggregate_mbps()),
            (0.44, 592.0, 2946.0)
        );
        let id = c.lookup("identity").unwrap();
        assert!(id.is_unshaped());
        assert!(id.single_conn_rate().is_infinite());
        for name in REGION_PROFILES {
            let p = c.lookup(name).unwrap();
            assert!(p.aggregate_mbps() >= p.single_conn_mbps());
        }
    }

    #[test]
    fn unknown_profile_lists_valid_names() {
        let err = lookup("atlantis").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("atlantis"));
        assert!(msg.contains("nc-bahrain") && msg.contains("identity"));
    }

    #[test]
    fn multi_to_single_ratio_widens_with_latency() {
        let c = ProfileCatalog::builtin();
        let ratios: Vec<f64> = REGION_PROFILES
            .iter()
            .map(|n| {
                let p = c.lookup(n).unwrap();
                p.aggregate_mbps() / p.single_conn_mbps()
            })
            .collect();
        assert!((ratios[0] - 4.976).abs() < 0.01);
        assert!((ratios[6] - 64.35).abs() < 0.01);
        // Oregon (4.31) dips below nc-nc; from there on the gap widens.
        assert!(ratios[1..].windows(2).all(|w| w[1] > w[0]));
        assert!(ratios[6] > ratios[0]);
    }

    #[test]
    fn transfer_time_examples() {
        let bahrain = lookup("nc-bahrain").unwrap();
        assert!((secs(model_transfer_time(6_900_000, &bahrain, 1)) - 1.111).abs() < 1e-9);
        // 64 * 6.90 = 441.6 MB/s is just below the 444 MB/s cap.
        let t = secs(model_transfer_time(444_000_000, &bahrain, 64));
        assert!((t - (0.111 + 444.0 / 441.6)).abs() < 1e-9);
        assert!((t - 1.116).abs() < 1e-3);
        for p in ProfileCatalog::builtin().iter() {
            assert_eq!(model_transfer_time(0, p, 3), p.latency());
        }
    }

    #[test]
    fn scale_multiplies_rates_not_latency() {
        let p = lookup("nc-virginia").unwrap().with_scale(0.02);
        assert!((p.latency_ms() - 32.3).abs() < 1e-9);
        assert!((p.single_conn_rate() - 39.4e6 * 0.02).abs() < 1e-6);
        let full = model_transfer_time(10_000_000, &lookup("nc-virginia").unwrap(), 1);
        let scaled = model_transfer_time(200_000, &p, 1);
        assert!((secs(full) - secs(scaled)).abs() < 1e-9);
    }

    #[test]
    fn overrides_patch_and_add() {
        let mut c = ProfileCatalog::builtin();
        c.apply_override(
            "nc-oregon",
            &ProfileOverride {
                latency_ms: Some(20.0),
                scale: Some(0.5),
                ..Default::default()
            },
        )
        .unwrap();
        let o = c.lookup("nc-oregon").unwrap();
        assert_eq!((o.latency_ms(), o.single_conn_mbps(), o.scale()), (20.0, 133.0, 0.5));

        let partial = ProfileOverride {
            latency_ms: Some(5.0),
            ..Default::default()
        };
        assert!(c.apply_override("mars", &partial).is_err());
        c.apply_override(
            "mars",
            &ProfileOverride {
                latency_ms: Some(5.0),
                single_mbps: Some(10.0),
                aggregate_mbps: Some(40.0),
                scale: None,
            },
        )
        .unwrap();
        assert_eq!(c.lookup("mars").unwrap().aggregate_mbps(), 40.0);

        let bad = ProfileOverride {
            aggregate_mbps: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(
            c.apply_override("nc-nc", &bad),
            Err(NetemError::InvalidProfile { .. })
        ));
    }

    #[test]
    fn store_link_uses_multi_connection_rate() {
        let s = lookup("nc-hongkong").unwrap().store_link();
        assert_eq!(s.single_conn_mbps(), 513.0);
        assert_eq!(s.aggregate_mbps(), 513.0);
        assert_eq!(s.latency_ms(), 83.3);
    }

    proptest! {
        #[test]
        fn transfer_time_non_increasing_in_connections(
            idx in 0usize..7,
            size in 0u64..2_000_000_000,
            n in 1u32..128,
        ) {
            let p = lookup(REGION_PROFILES[idx]).unwrap();
            let a = model_transfer_time(size, &p, n);
            let b = model_transfer_time(size, &p, n + 1);
            prop_assert!(b <= a);
            if n >= p.saturating_conns() {
                prop_assert_eq!(a, b);
            }
        }
    }
}
