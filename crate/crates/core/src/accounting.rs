//! Runtime, traffic and modeled energy bookkeeping.
//!
//! Energy is never measured. Each node declares idle and busy power plus a
//! per-byte transmit cost; busy phases (train, aggregate, evaluate) draw busy
//! power, communication and idle time draw idle power.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("negative duration {seconds} s for {node}")]
    NegativeDuration { node: String, seconds: f64 },
    #[error("baseline {0} is zero")]
    ZeroBaseline(&'static str),
    #[error("invalid power model for {node}: {reason}")]
    InvalidPower { node: String, reason: String },
}

pub type Result<T> = std::result::Result<T, AccountingError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePower {
    pub idle_w: f64,
    pub busy_w: f64,
    pub joules_per_byte: f64,
}

impl Default for NodePower {
    fn default() -> Self {
        Self { idle_w: 50.0, busy_w: 250.0, joules_per_byte: 1e-7 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    #[serde(default)]
    pub default: NodePower,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub nodes: BTreeMap<String, NodePower>,
}

impl PowerModel {
    pub fn uniform(node: NodePower) -> Self {
        Self { default: node, nodes: BTreeMap::new() }
    }

    pub fn node(&self, id: &str) -> NodePower {
        self.nodes.get(id).copied().unwrap_or(self.default)
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(("default", &self.default)).chain(self.nodes.iter().map(|(k, v)| (k.as_str(), v)));
        for (node, p) in all {
            let bad =
                |reason: &str| Err(AccountingError::InvalidPower { node: node.to_owned(), reason: reason.into() });
            if [p.idle_w, p.busy_w, p.joules_per_byte].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("all quantities must be finite and nonnegative");
            }
            if p.busy_w < p.idle_w {
                return bad("busy power must be at least idle power");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Aggregate,
    Evaluate,
    Communicate,
    Idle,
}

impl Phase {
    pub fn is_busy(self) -> bool {
        matches!(self, Phase::Train | Phase::Aggregate | Phase::Evaluate)
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Aggregate => "aggregate",
            Phase::Evaluate => "evaluate",
            Phase::Communicate => "communicate",
            Phase::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub node: String,
    /// `None` for work outside the training rounds (final evaluation).
    pub round: Option<u32>,
    pub phase: Phase,
    pub seconds: f64,
    pub bytes_out: u64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub runtime_s: f64,
    pub energy_j: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeTotals {
    pub busy_s: f64,
    pub idle_s: f64,
    pub communicate_s: f64,
    pub bytes_out: u64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub power: PowerModel,
    pub entries: Vec<LedgerEntry>,
    /// Measured wall-clock time of the whole run.
    pub wall_s: f64,
    /// Modeled transfer time not already contained in `wall_s`.
    pub modeled_comm_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl RunLedger {
    pub fn new(power: PowerModel) -> Self {
        Self { power, ..Self::default() }
    }

    pub fn record_phase(
        &mut self,
        node: &str,
        round: Option<u32>,
        phase: Phase,
        seconds: f64,
        bytes_out: u64,
    ) -> Result<&LedgerEntry> {
        if seconds.is_nan() || seconds < 0.0 {
            return Err(AccountingError::NegativeDuration { node: node.to_owned(), seconds });
        }
        let p = self.power.node(node);
        let watts = if phase.is_busy() { p.busy_w } else { p.idle_w };
        let energy_j = seconds * watts + bytes_out as f64 * p.joules_per_byte;
        self.entries.push(LedgerEntry { node: node.to_owned(), round, phase, seconds, bytes_out, energy_j });
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn runtime_s(&self) -> f64 {
        self.wall_s + self.modeled_comm_s
    }

    pub fn total_energy_j(&self) -> f64 {
        self.entries.iter().map(|e| e.energy_j).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes_out).sum()
    }

    pub fn totals(&self) -> Totals {
        Totals { runtime_s: self.runtime_s(), energy_j: self.total_energy_j(), bytes: self.total_bytes() }
    }

    pub fn bytes_from(&self, node: &str) -> u64 {
        self.entries.iter().filter(|e| e.node == node).map(|e| e.bytes_out).sum()
    }

    /// Distinct training rounds with at least one entry.
    pub fn rounds(&self) -> usize {
        self.entries.iter().filter_map(|e| e.round).collect::<std::collections::BTreeSet<_>>().len()
    }

    pub fn per_node(&self) -> BTreeMap<String, NodeTotals> {
        let mut out: BTreeMap<String, NodeTotals> = BTreeMap::new();
        for e in &self.entries {
            let t = out.entry(e.node.clone()).or_default();
            match e.phase {
                Phase::Idle => t.idle_s += e.seconds,
                Phase::Communicate => t.communicate_s += e.seconds,
                _ => t.busy_s += e.seconds,
            }
            t.bytes_out += e.bytes_out;
            t.energy_j += e.energy_j;
        }
        out
    }

    pub fn merge(&mut self, other: &RunLedger) {
        self.entries.extend(other.entries.iter().cloned());
        self.modeled_comm_s += other.modeled_comm_s;
    }

    /// One row per node, round and phase.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,round,phase,seconds,bytes_out,energy_j\n");
        for e in &self.entries {
            let round = e.round.map_or_else(|| "final".to_owned(), |r| r.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{:.6}",
                e.node,
                round,
                e.phase.name(),
                e.seconds,
                e.bytes_out,
                e.energy_j
            );
        }
        out
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            totals: self.totals(),
            wall_s: self.wall_s,
            modeled_comm_s: self.modeled_comm_s,
            rounds: self.rounds(),
            nodes: self.per_node(),
            power: self.power.clone(),
        }
    }

    pub fn report(&self, title: &str) -> String {
        let mut out = format!("{title} (modeled energy)\n");
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10} {:>14} {:>12}",
            "node", "busy s", "idle s", "comm s", "bytes out", "energy kJ"
        );
        for (node, t) in self.per_node() {
            let _ = writeln!(
                out,
                "{:<16} {:>10.3} {:>10.3} {:>10.4} {:>14} {:>12.4}",
                node,
                t.busy_s,
                t.idle_s,
                t.communicate_s,
                t.bytes_out,
                t.energy_j / 1e3
            );
        }
        let t = self.totals();
        let _ =
            writeln!(out, "runtime {:.3} s, energy {:.4} kJ, traffic {} bytes", t.runtime_s, t.energy_j / 1e3, t.bytes);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub totals: Totals,
    pub wall_s: f64,
    pub modeled_comm_s: f64,
    pub rounds: usize,
    pub nodes: BTreeMap<String, NodeTotals>,
    pub power: PowerModel,
}

/// Signed percentage changes from `base` to `other`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runtime_pct: f64,
    pub energy_pct: f64,
    /// Absent when the baseline moved no bytes (centralized training).
    pub bytes_pct: Option<f64>,
}

fn pct(base: f64, other: f64) -> f64 {
    (other - base) / base * 100.0
}

pub fn compare_totals(base: &Totals, other: &Totals) -> Result<Comparison> {
    if base.runtime_s == 0.0 {
        return Err(AccountingError::ZeroBaseline("runtime"));
    }
    if base.energy_j == 0.0 {
        return Err(AccountingError::ZeroBaseline("energy"));
    }
    Ok(Comparison {
        runtime_pct: pct(base.runtime_s, other.runtime_s),
        energy_pct: pct(base.energy_j, other.energy_j),
        bytes_pct: (base.bytes > 0).then(|| pct(base.bytes as f64, other.bytes as f64)),
    })
}

pub fn compare(base: &RunLedger, other: &RunLedger) -> Result<Comparison> {
    compare_totals(&base.totals(), &other.totals())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(busy: f64, idle: f64, jpb: f64) -> RunLedger {
        RunLedger::new(PowerModel::uniform(NodePower { idle_w: idle, busy_w: busy, joules_per_byte: jpb }))
    }

    #[test]
    fn busy_energy_is_power_times_time() {
        let mut l = ledger(250.0, 10.0, 0.0);
        assert_eq!(l.record_phase("n", Some(0), Phase::Train, 100.0, 0).unwrap().energy_j, 25_000.0);
        assert_eq!(l.record_phase("n", Some(0), Phase::Train, 0.0, 0).unwrap().energy_j, 0.0);
    }

    #[test]
    fn bytes_add_transmit_energy() {
        let mut l = ledger(300.0, 10.0, 1e-7);
        let e = l.record_phase("n", Some(0), Phase::Train, 10.0, 1_000_000_000).unwrap();
        assert!((e.energy_j - 3100.0).abs() < 1e-9);
    }

    #[test]
    fn idle_and_communicate_use_idle_power() {
        let mut l = ledger(300.0, 40.0, 0.0);
        assert_eq!(l.record_phase("n", None, Phase::Idle, 2.0, 0).unwrap().energy_j, 80.0);
        assert_eq!(l.record_phase("n", None, Phase::Communicate, 1.0, 0).unwrap().energy_j, 40.0);
    }

    #[test]
    fn negative_duration_rejected() {
        let mut l = ledger(1.0, 1.0, 0.0);
        assert!(matches!(
            l.record_phase("n", Some(1), Phase::Idle, -0.5, 0),
            Err(AccountingError::NegativeDuration { .. })
        ));
        assert!(l.entries.is_empty());
    }

    #[test]
    fn totals_are_sums_of_entries() {
        let mut l = ledger(100.0, 10.0, 1e-6);
        l.record_phase("a", Some(0), Phase::Train, 1.5, 10).unwrap();
        l.record_phase("b", Some(0), Phase::Communicate, 0.5, 1000).unwrap();
        l.record_phase("a", Some(1), Phase::Idle, 2.0, 0).unwrap();
        let t = l.totals();
        assert_eq!(t.bytes, 1010);
        assert!((t.energy_j - (150.0 + 1e-5 + 5.0 + 1e-3 + 20.0)).abs() < 1e-9);
        assert_eq!(l.rounds(), 2);
        assert_eq!(l.per_node()["a"].busy_s, 1.5);
        let csv = l.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("b,0,communicate,"));
    }

    #[test]
    fn reference_runtime_and_energy_deltas() {
        let cl = Totals { runtime_s: 643.245, energy_j: 382_279.0, bytes: 0 };
        let fl = Totals { runtime_s: 1687.0624, energy_j: 1_008_915.2, bytes: 123 };
        let c = compare_totals(&cl, &fl).unwrap();
        assert!((c.runtime_pct - 162.3).abs() <= 0.05, "{}", c.runtime_pct);
        assert!((c.energy_pct - 163.92).abs() <= 0.005, "{}", c.energy_pct);
        assert_eq!(c.bytes_pct, None);
    }

    #[test]
    fn identical_ledgers_compare_to_zero() {
        let mut l = ledger(100.0, 10.0, 1e-6);
        l.record_phase("a", Some(0), Phase::Train, 3.0, 500).unwrap();
        l.wall_s = 3.0;
        let c = compare(&l, &l).unwrap();
        assert_eq!((c.runtime_pct, c.energy_pct, c.bytes_pct), (0.0, 0.0, Some(0.0)));
        assert_eq!(compare(&ledger(1.0, 1.0, 0.0), &l), Err(AccountingError::ZeroBaseline("runtime")));
    }

    #[test]
    fn power_validation() {
        assert!(PowerModel::default().validate().is_ok());
        let bad = PowerModel::uniform(NodePower { idle_w: 100.0, busy_w: 50.0, joules_per_byte: 0.0 });
        assert!(bad.validate().is_err());
        let bad = PowerModel::uniform(NodePower { idle_w: -1.0, busy_w: 50.0, joules_per_byte: 0.0 });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_declares_modeled_energy() {
        let mut l = ledger(100.0, 10.0, 0.0);
        l.record_phase("server", Some(0), Phase::Aggregate, 1.0, 0).unwrap();
        let text = l.report("S&G FedAvg");
        assert!(text.starts_with("S&G FedAvg (modeled energy)"));
        assert!(text.contains("server"));
    }
}
