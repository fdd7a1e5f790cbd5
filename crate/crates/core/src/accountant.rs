//! Rényi differential privacy accounting.
//!
//! Every noisy query answered by the aggregator is appended to a
//! [`PrivacyLedger`]. The ledger composes per-order RDP costs additively and
//! converts the composed curve to an (ε, δ) guarantee. All values are in nats.
//!
//! Three mechanisms are tracked:
//!
//! * the noisy threshold check on the top vote count, a sensitivity-1
//!   Gaussian mechanism costing `λ / (2σ²)` at every order;
//! * the noisy argmax over a vote histogram (GNMax). When the vote gaps are
//!   large the data-dependent bound `exp(-2λ/σ²) / λ` at `λ = (n1 - n2) / 4`
//!   applies at that single order; every other order is charged the
//!   data-independent cost `λ / σ²`;
//! * Laplace releases, which are pure ε-DP and are added to the final ε after
//!   the RDP → DP conversion (basic composition).

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Default Rényi order grid: 1.5, 2..=64, 128, 256, 512, 1024.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.5];
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0, 512.0, 1024.0]);
    orders
}

/// RDP cost as a function of the Rényi order, sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    epsilons: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, epsilons: Vec<f64>) -> Result<Self> {
        if orders.len() != epsilons.len() {
            return param(format!(
                "curve has {} orders but {} epsilons",
                orders.len(),
                epsilons.len()
            ));
        }
        validate_orders(&orders)?;
        if let Some(e) = epsilons.iter().find(|e| e.is_nan() || **e < 0.0) {
            return param(format!("RDP epsilon must be nonnegative, got {e}"));
        }
        Ok(Self { orders, epsilons })
    }

    pub fn zeros(orders: Vec<f64>) -> Result<Self> {
        let epsilons = vec![0.0; orders.len()];
        Self::new(orders, epsilons)
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Epsilon at exactly `order`, if it is on the grid.
    pub fn at(&self, order: f64) -> Option<f64> {
        self.orders
            .iter()
            .position(|&o| o == order)
            .map(|i| self.epsilons[i])
    }
}

fn validate_orders(orders: &[f64]) -> Result<()> {
    for (i, &o) in orders.iter().enumerate() {
        if !(o > 1.0) || !o.is_finite() {
            return param(format!("Rényi order must be finite and > 1, got {o}"));
        }
        if i > 0 && orders[i - 1] >= o {
            return param("Rényi orders must be strictly increasing");
        }
    }
    Ok(())
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return param(format!("noise scale must be positive and finite, got {sigma}"));
    }
    Ok(())
}

/// RDP of the noisy top-count threshold check: `λ / (2σ²)` at every order.
pub fn gaussian_threshold_rdp(sigma: f64, orders: &[f64]) -> Result<RdpCurve> {
    validate_sigma(sigma)?;
    validate_orders(orders)?;
    let epsilons = orders.iter().map(|&l| l / (2.0 * sigma * sigma)).collect();
    Ok(RdpCurve {
        orders: orders.to_vec(),
        epsilons,
    })
}

/// Data-independent GNMax cost `λ / σ²` (sensitivity √2 over the vote vector).
pub fn gnmax_fallback_rdp(sigma: f64, order: f64) -> f64 {
    order / (sigma * sigma)
}

/// Top three vote counts of a histogram, `n1 >= n2 >= n3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TopCounts {
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
}

impl TopCounts {
    pub fn new(n1: u64, n2: u64, n3: u64) -> Result<Self> {
        if n1 < n2 || n2 < n3 {
            return param(format!(
                "top counts must be sorted descending, got ({n1}, {n2}, {n3})"
            ));
        }
        Ok(Self { n1, n2, n3 })
    }

    /// Top three of an arbitrary histogram; missing ranks count as zero.
    pub fn of(counts: &[u64]) -> Self {
        let mut top = [0u64; 3];
        for &c in counts {
            if c > top[0] {
                top = [c, top[0], top[1]];
            } else if c > top[1] {
                top = [top[0], c, top[1]];
            } else if c > top[2] {
                top[2] = c;
            }
        }
        Self {
            n1: top[0],
            n2: top[1],
            n3: top[2],
        }
    }

    pub fn gap(&self) -> u64 {
        self.n1 - self.n2
    }
}

/// Outcome of evaluating the data-dependent GNMax bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GnmaxBound {
    /// The bound applies at a single order.
    DataDependent { order: f64, epsilon: f64 },
    /// The vote gaps are too small; charge the data-independent cost instead.
    Fallback,
}

/// Data-dependent GNMax bound `(λ, exp(-2λ/σ²)/λ)` at `λ = (n1 - n2) / 4`.
///
/// Applies only when `n1 - n2 >= 4σ`, `n2 - n3 >= 4σ` and `λ >= 2`.
pub fn gnmax_data_dependent_rdp(top: TopCounts, sigma: f64) -> Result<GnmaxBound> {
    validate_sigma(sigma)?;
    let top = TopCounts::new(top.n1, top.n2, top.n3)?;
    let gap12 = (top.n1 - top.n2) as f64;
    let gap23 = (top.n2 - top.n3) as f64;
    let order = gap12 / 4.0;
    if gap12 < 4.0 * sigma || gap23 < 4.0 * sigma || order < 2.0 {
        return Ok(GnmaxBound::Fallback);
    }
    let epsilon = (-2.0 * order / (sigma * sigma)).exp() / order;
    Ok(GnmaxBound::DataDependent { order, epsilon })
}

/// Mechanism family of a ledger entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    GaussianThreshold,
    GnmaxDataDependent,
    Laplace,
}

/// One recorded query.
///
/// A noise scale of exactly zero is accepted for threshold and GNMax entries
/// and means the query was answered without noise; its cost is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: String,
    pub kind: MechanismKind,
    pub sigma: Option<f64>,
    /// Number of identical queries folded into this entry.
    pub count: u32,
    /// `(order, epsilon)` of the data-dependent bound, when it applied.
    pub data_dependent: Option<(f64, f64)>,
    /// Pure ε of a Laplace release.
    pub pure_epsilon: Option<f64>,
}

fn validate_entry_sigma(sigma: f64) -> Result<()> {
    if sigma.is_nan() || sigma < 0.0 || sigma.is_infinite() {
        return param(format!("noise scale must be finite and >= 0, got {sigma}"));
    }
    Ok(())
}

impl LedgerEntry {
    /// `count` threshold checks at noise scale `sigma`.
    pub fn gaussian_threshold(id: impl Into<String>, sigma: f64, count: u32) -> Result<Self> {
        validate_entry_sigma(sigma)?;
        if count == 0 {
            return param("threshold entry must cover at least one query");
        }
        Ok(Self {
            id: id.into(),
            kind: MechanismKind::GaussianThreshold,
            sigma: Some(sigma),
            count,
            data_dependent: None,
            pure_epsilon: None,
        })
    }

    /// One GNMax argmax release over a histogram with the given top counts.
    pub fn gnmax(id: impl Into<String>, sigma: f64, top: TopCounts) -> Result<Self> {
        validate_entry_sigma(sigma)?;
        let data_dependent = if sigma > 0.0 {
            match gnmax_data_dependent_rdp(top, sigma)? {
                GnmaxBound::DataDependent { order, epsilon } => Some((order, epsilon)),
                GnmaxBound::Fallback => None,
            }
        } else {
            TopCounts::new(top.n1, top.n2, top.n3)?;
            None
        };
        Ok(Self {
            id: id.into(),
            kind: MechanismKind::GnmaxDataDependent,
            sigma: Some(sigma),
            count: 1,
            data_dependent,
            pure_epsilon: None,
        })
    }

    /// A pure ε-DP Laplace release.
    pub fn laplace(id: impl Into<String>, epsilon: f64) -> Result<Self> {
        laplace_rdp_or_dp(id, epsilon)
    }

    /// Per-order slope `c` such that the cost is `c·λ` away from any
    /// data-dependent order.
    fn slope(&self) -> f64 {
        let sigma = self.sigma.unwrap_or(0.0);
        let var = sigma * sigma;
        match self.kind {
            MechanismKind::GaussianThreshold => {
                if var == 0.0 {
                    f64::INFINITY
                } else {
                    self.count as f64 / (2.0 * var)
                }
            }
            MechanismKind::GnmaxDataDependent => {
                if var == 0.0 {
                    f64::INFINITY
                } else {
                    self.count as f64 / var
                }
            }
            MechanismKind::Laplace => 0.0,
        }
    }

    /// Tightest valid RDP cost of this entry at `order`.
    pub fn rdp_at(&self, order: f64) -> f64 {
        let base = self.slope() * order;
        match self.data_dependent {
            Some((o, e)) if o == order => base.min(e),
            _ => base,
        }
    }
}

/// Record a pure ε-DP Laplace cost. It composes with the final guarantee by
/// plain addition.
pub fn laplace_rdp_or_dp(id: impl Into<String>, epsilon: f64) -> Result<LedgerEntry> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return param(format!("Laplace epsilon must be positive, got {epsilon}"));
    }
    Ok(LedgerEntry {
        id: id.into(),
        kind: MechanismKind::Laplace,
        sigma: None,
        count: 1,
        data_dependent: None,
        pure_epsilon: Some(epsilon),
    })
}

/// An (ε, δ) guarantee and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
    pub witness_order: f64,
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return param(format!("delta must lie in (0, 1), got {delta}"));
    }
    Ok(())
}

/// Convert an RDP curve to (ε, δ)-DP: `min_λ ε(λ) + ln(1/δ)/(λ-1)`.
/// Ties go to the smaller order.
pub fn to_dp(curve: &RdpCurve, delta: f64) -> Result<DpGuarantee> {
    validate_delta(delta)?;
    if curve.is_empty() {
        return param("cannot convert an empty RDP curve");
    }
    let log_inv_delta = -delta.ln();
    let mut best = DpGuarantee {
        epsilon: f64::INFINITY,
        delta,
        witness_order: curve.orders[0],
    };
    for (&order, &eps) in curve.orders.iter().zip(&curve.epsilons) {
        let candidate = eps + log_inv_delta / (order - 1.0);
        if candidate < best.epsilon {
            best.epsilon = candidate;
            best.witness_order = order;
        }
    }
    Ok(best)
}

/// Pointwise sum of the ledger's entries on its order grid.
pub fn compose(ledger: &PrivacyLedger) -> RdpCurve {
    ledger.composed()
}

/// Final guarantee of a ledger including the Laplace side channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalGuarantee {
    /// Total ε: converted RDP part plus `laplace_extra`.
    pub epsilon: f64,
    pub delta: f64,
    /// `None` when no RDP query has been recorded.
    pub witness_order: Option<f64>,
    pub laplace_extra: f64,
}

fn order_key(order: f64) -> u64 {
    order.to_bits()
}

/// Composition state without the entry list; cheap to clone.
#[derive(Debug, Clone, PartialEq)]
struct Accounting {
    orders: Vec<f64>,
    composed: Vec<f64>,
    slope: f64,
    /// Sum of `(bound − slope·λ)` corrections of data-dependent entries,
    /// keyed by order.
    corrections: BTreeMap<u64, f64>,
    laplace: f64,
    rdp_entries: usize,
}

impl Accounting {
    fn new(orders: Vec<f64>) -> Self {
        let composed = vec![0.0; orders.len()];
        Self {
            orders,
            composed,
            slope: 0.0,
            corrections: BTreeMap::new(),
            laplace: 0.0,
            rdp_entries: 0,
        }
    }

    fn value_at(&self, order: f64) -> f64 {
        if self.rdp_entries == 0 {
            return 0.0;
        }
        self.slope * order + self.corrections.get(&order_key(order)).copied().unwrap_or(0.0)
    }

    fn add(&mut self, entry: &LedgerEntry) {
        if entry.kind == MechanismKind::Laplace {
            self.laplace += entry.pure_epsilon.unwrap_or(0.0);
            return;
        }
        if let Some((order, _)) = entry.data_dependent {
            if let Err(pos) = self
                .orders
                .binary_search_by(|o| o.partial_cmp(&order).expect("orders are finite"))
            {
                let value = self.value_at(order);
                self.orders.insert(pos, order);
                self.composed.insert(pos, value);
            }
            let slope_cost = entry.slope() * order;
            *self.corrections.entry(order_key(order)).or_insert(0.0) +=
                entry.rdp_at(order) - slope_cost;
        }
        for (o, c) in self.orders.iter().zip(self.composed.iter_mut()) {
            *c += entry.rdp_at(*o);
        }
        self.slope += entry.slope();
        self.rdp_entries += 1;
    }

    fn guarantee(&self, delta: f64) -> Result<FinalGuarantee> {
        validate_delta(delta)?;
        if self.rdp_entries == 0 {
            return Ok(FinalGuarantee {
                epsilon: self.laplace,
                delta,
                witness_order: None,
                laplace_extra: self.laplace,
            });
        }
        let curve = RdpCurve {
            orders: self.orders.clone(),
            epsilons: self.composed.clone(),
        };
        let dp = to_dp(&curve, delta)?;
        Ok(FinalGuarantee {
            epsilon: dp.epsilon + self.laplace,
            delta,
            witness_order: Some(dp.witness_order),
            laplace_extra: self.laplace,
        })
    }
}

/// Append-only record of every privacy-consuming query.
///
/// The order grid starts from [`default_orders`] (or a custom grid) and gains
/// each data-dependent GNMax order as an extra point.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
    acc: Accounting,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            acc: Accounting::new(default_orders()),
        }
    }

    pub fn with_orders(orders: Vec<f64>) -> Result<Self> {
        validate_orders(&orders)?;
        if orders.is_empty() {
            return param("order grid must not be empty");
        }
        Ok(Self {
            entries: Vec::new(),
            acc: Accounting::new(orders),
        })
    }

    pub fn append(&mut self, entry: LedgerEntry) {
        self.acc.add(&entry);
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn orders(&self) -> &[f64] {
        &self.acc.orders
    }

    /// Composed RDP curve on the current grid. All zero for an empty ledger.
    pub fn composed(&self) -> RdpCurve {
        RdpCurve {
            orders: self.acc.orders.clone(),
            epsilons: self.acc.composed.clone(),
        }
    }

    /// Sum of the pure-ε Laplace costs.
    pub fn laplace_extra(&self) -> f64 {
        self.acc.laplace
    }

    /// Whether any RDP (non-Laplace) query has been recorded.
    pub fn has_rdp_queries(&self) -> bool {
        self.acc.rdp_entries > 0
    }

    /// Final guarantee: RDP part converted at `delta` plus the Laplace
    /// side channel. A ledger with no RDP queries contributes zero.
    pub fn guarantee(&self, delta: f64) -> Result<FinalGuarantee> {
        self.acc.guarantee(delta)
    }

    /// Guarantee the ledger would report after appending `pending`, without
    /// appending.
    pub fn guarantee_after(&self, pending: &[LedgerEntry], delta: f64) -> Result<FinalGuarantee> {
        let mut acc = self.acc.clone();
        for e in pending {
            acc.add(e);
        }
        acc.guarantee(delta)
    }

    /// Serializable report of every query, the composed curve and the final
    /// guarantee at `delta`.
    pub fn report(&self, delta: f64) -> Result<PrivacyReport> {
        let fin = self.guarantee(delta)?;
        let queries = self
            .entries
            .iter()
            .map(|e| {
                let (lambda, epsilon_rdp) = match (e.kind, e.data_dependent) {
                    (MechanismKind::Laplace, _) => (None, e.pure_epsilon),
                    (_, Some((o, _))) => (Some(o), finite(e.rdp_at(o))),
                    (_, None) => match fin.witness_order {
                        Some(o) => (Some(o), finite(e.rdp_at(o))),
                        None => (None, None),
                    },
                };
                QueryRecord {
                    id: e.id.clone(),
                    kind: e.kind,
                    sigma: e.sigma,
                    lambda,
                    epsilon_rdp,
                }
            })
            .collect();
        Ok(PrivacyReport {
            queries,
            composed: ComposedRecord {
                orders: self.acc.orders.clone(),
                epsilons: self.acc.composed.iter().map(|&e| finite(e)).collect(),
            },
            final_: FinalRecord {
                epsilon: finite(fin.epsilon),
                delta,
                witness_order: fin.witness_order,
                laplace_extra: fin.laplace_extra,
            },
        })
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Ledger shared between threads: appends are serialized by the write lock,
/// readers always observe a whole entry or none of it.
#[derive(Debug, Clone, Default)]
pub struct SharedLedger {
    inner: Arc<RwLock<PrivacyLedger>>,
}

impl SharedLedger {
    pub fn new(ledger: PrivacyLedger) -> Self {
        Self {
            inner: Arc::new(RwLock::new(ledger)),
        }
    }

    pub fn append(&self, entry: LedgerEntry) -> Result<()> {
        self.inner
            .write()
            .map_err(|_| Error::Internal("ledger lock poisoned".into()))?
            .append(entry);
        Ok(())
    }

    pub fn composed(&self) -> Result<RdpCurve> {
        Ok(self
            .inner
            .read()
            .map_err(|_| Error::Internal("ledger lock poisoned".into()))?
            .composed())
    }

    pub fn snapshot(&self) -> Result<PrivacyLedger> {
        Ok(self
            .inner
            .read()
            .map_err(|_| Error::Internal("ledger lock poisoned".into()))?
            .clone())
    }
}

/// JSON privacy report. Non-finite values (noiseless queries) are written as
/// `null`. For Laplace entries `epsilon_rdp` carries the pure ε and `lambda`
/// is null; for other entries `lambda` is the data-dependent order when that
/// bound applied, otherwise the final witness order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub queries: Vec<QueryRecord>,
    pub composed: ComposedRecord,
    #[serde(rename = "final")]
    pub final_: FinalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub kind: MechanismKind,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub epsilon_rdp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedRecord {
    pub orders: Vec<f64>,
    pub epsilons: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub witness_order: Option<f64>,
    pub laplace_extra: f64,
}
