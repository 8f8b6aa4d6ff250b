//! Finite structural causal model of a bilateral image pair.
//!
//! The graph is fixed: a shared cause `C` feeds every node, and each side
//! `U ∈ {T, R}` runs the chain `Z_U → Y_U → H_U → X_U`:
//!
//! ```text
//! C → {Z_T, Z_R} → {Y_T, Y_R} → {H_T, H_R} → {X_T, X_R}
//! ```
//!
//! Every node owns an exogenous noise distribution and a lookup table from
//! (parent values, noise outcome) to its value. Because all domains are
//! finite, posteriors and counterfactuals are computed by enumerating every
//! joint exogenous configuration ("world").
//!
//! The probability type is generic: `f64` for speed, or
//! [`num_rational::BigRational`] for exact arithmetic.

use std::fmt::{self, Debug};
use std::path::Path;
use std::str::FromStr;

use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgnError, Result};

/// Probability value usable by the enumerator.
pub trait Probability: Clone + Debug + PartialOrd + Num + Signed + FromPrimitive + ToPrimitive {}

impl<P> Probability for P where P: Clone + Debug + PartialOrd + Num + Signed + FromPrimitive + ToPrimitive {}

pub type ExactProbability = BigRational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    C,
    ZT,
    ZR,
    YT,
    YR,
    HT,
    HR,
    XT,
    XR,
}

impl Node {
    pub const ALL: [Node; 9] = [
        Node::C,
        Node::ZT,
        Node::ZR,
        Node::YT,
        Node::YR,
        Node::HT,
        Node::HR,
        Node::XT,
        Node::XR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Node::C => "C",
            Node::ZT => "Z_T",
            Node::ZR => "Z_R",
            Node::YT => "Y_T",
            Node::YR => "Y_R",
            Node::HT => "H_T",
            Node::HR => "H_R",
            Node::XT => "X_T",
            Node::XR => "X_R",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Node {
    type Err = CgnError;

    fn from_str(s: &str) -> Result<Self> {
        Node::ALL
            .iter()
            .copied()
            .find(|n| n.name().eq_ignore_ascii_case(s) || n.name().replace('_', "").eq_ignore_ascii_case(s))
            .ok_or_else(|| CgnError::UnknownNode(s.to_string()))
    }
}

/// Exogenous noise plus lookup table of one node.
///
/// `table[row][k]` is the node value for parent configuration `row` and
/// noise outcome `k`. Rows enumerate parent configurations with `C`
/// outermost: `Z` has one row per `c`; `Y` rows are `(c, z)`; `H` rows are
/// `(c, y)`; `X` rows are `(c, h)`, each in domain order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism<P> {
    pub noise: Vec<P>,
    pub table: Vec<Vec<i64>>,
}

impl<P: Probability> Mechanism<P> {
    pub fn deterministic(table: Vec<i64>) -> Self {
        Self {
            noise: vec![P::one()],
            table: table.into_iter().map(|v| vec![v]).collect(),
        }
    }

    /// True when every positive-mass noise outcome yields the same value in
    /// every row, i.e. the node is a function of its parents alone.
    pub fn is_noise_free(&self) -> bool {
        self.table.iter().all(|row| {
            let mut seen = None;
            row.iter()
                .zip(&self.noise)
                .filter(|(_, p)| **p > P::zero())
                .all(|(v, _)| match seen {
                    None => {
                        seen = Some(*v);
                        true
                    }
                    Some(s) => s == *v,
                })
        })
    }

    fn map_prob<Q: Probability>(&self, f: &impl Fn(&P) -> Q) -> Mechanism<Q> {
        Mechanism {
            noise: self.noise.iter().map(f).collect(),
            table: self.table.clone(),
        }
    }
}

/// Finite structural causal model for the bilateral graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmSpec<P> {
    pub domain_c: Vec<i64>,
    pub domain_h: Vec<i64>,
    pub domain_x: Vec<i64>,
    /// Distribution of `C` over `domain_c`.
    pub prior_c: Vec<P>,
    pub z_t: Mechanism<P>,
    pub z_r: Mechanism<P>,
    pub y_t: Mechanism<P>,
    pub y_r: Mechanism<P>,
    pub h_t: Mechanism<P>,
    pub h_r: Mechanism<P>,
    pub x_t: Mechanism<P>,
    pub x_r: Mechanism<P>,
    /// Asserts that the Y, H and X mechanisms agree across sides.
    pub shared_mechanisms: bool,
}

/// Observation on the target side: feature value and lesion state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evidence {
    pub h_t: i64,
    pub z_t: u8,
}

/// Finite distribution with explicit support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution<P> {
    pub support: Vec<i64>,
    pub mass: Vec<P>,
}

impl<P: Probability> DiscreteDistribution<P> {
    pub fn point_mass(support: &[i64], at: i64) -> Self {
        Self {
            support: support.to_vec(),
            mass: support
                .iter()
                .map(|&v| if v == at { P::one() } else { P::zero() })
                .collect(),
        }
    }

    pub fn total(&self) -> P {
        self.mass.iter().cloned().fold(P::zero(), |a, b| a + b)
    }

    pub fn prob(&self, value: i64) -> P {
        self.support
            .iter()
            .position(|&v| v == value)
            .map(|i| self.mass[i].clone())
            .unwrap_or_else(P::zero)
    }

    /// Total-variation distance `½ Σ |p − q|` over the union of supports.
    pub fn total_variation(&self, other: &Self) -> P {
        let mut values: Vec<i64> = self.support.iter().chain(&other.support).copied().collect();
        values.sort_unstable();
        values.dedup();
        let two = P::one() + P::one();
        values
            .into_iter()
            .map(|v| (self.prob(v) - other.prob(v)).abs())
            .fold(P::zero(), |a, b| a + b)
            / two
    }

    pub fn to_f64(&self) -> DiscreteDistribution<f64> {
        DiscreteDistribution {
            support: self.support.clone(),
            mass: self.mass.iter().map(|p| p.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    }
}

/// Value of every node in one world, as domain values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub c: i64,
    pub z_t: i64,
    pub z_r: i64,
    pub y_t: i64,
    pub y_r: i64,
    pub h_t: i64,
    pub h_r: i64,
    pub x_t: i64,
    pub x_r: i64,
}

impl Assignment {
    pub fn get(&self, node: Node) -> i64 {
        match node {
            Node::C => self.c,
            Node::ZT => self.z_t,
            Node::ZR => self.z_r,
            Node::YT => self.y_t,
            Node::YR => self.y_r,
            Node::HT => self.h_t,
            Node::HR => self.h_r,
            Node::XT => self.x_t,
            Node::XR => self.x_r,
        }
    }
}

/// A sampled world: exogenous draws plus the node values they induce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledWorld {
    /// Noise outcome index per node, in [`Node::ALL`] order (`C`'s entry is
    /// the index of its value).
    pub noise: [usize; 9],
    pub values: Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// Worst total variation between the counterfactual `H_T` under
    /// `Z_T := 0` and the `H_R` posterior, over lesion evidence.
    pub tv_eq2: f64,
    /// Worst total variation between the counterfactual under a factual
    /// (lesion-free) intervention and the point mass at the observation.
    pub tv_eq3: f64,
    pub pass: bool,
    pub evidence_checked: usize,
}

// Index-level compiled form used by the enumerator.
struct Compiled<P> {
    nc: usize,
    nh: usize,
    nx: usize,
    prior_c: Vec<P>,
    // [node] -> (noise, table[row][k] as value index)
    mechs: Vec<(Vec<P>, Vec<Vec<usize>>)>,
}

struct World<P> {
    weight: P,
    noise: [usize; 9],
    values: [usize; 9],
}

impl<P: Probability> ScmSpec<P> {
    pub fn mechanism(&self, node: Node) -> Option<&Mechanism<P>> {
        match node {
            Node::C => None,
            Node::ZT => Some(&self.z_t),
            Node::ZR => Some(&self.z_r),
            Node::YT => Some(&self.y_t),
            Node::YR => Some(&self.y_r),
            Node::HT => Some(&self.h_t),
            Node::HR => Some(&self.h_r),
            Node::XT => Some(&self.x_t),
            Node::XR => Some(&self.x_r),
        }
    }

    fn domain(&self, node: Node) -> Vec<i64> {
        match node {
            Node::C => self.domain_c.clone(),
            Node::ZT | Node::ZR | Node::YT | Node::YR => vec![0, 1],
            Node::HT | Node::HR => self.domain_h.clone(),
            Node::XT | Node::XR => self.domain_x.clone(),
        }
    }

    fn expected_rows(&self, node: Node) -> usize {
        let nc = self.domain_c.len();
        match node {
            Node::C => 0,
            Node::ZT | Node::ZR => nc,
            Node::YT | Node::YR | Node::HT | Node::HR => nc * 2,
            Node::XT | Node::XR => nc * self.domain_h.len(),
        }
    }

    pub fn map_prob<Q: Probability>(&self, f: impl Fn(&P) -> Q) -> ScmSpec<Q> {
        ScmSpec {
            domain_c: self.domain_c.clone(),
            domain_h: self.domain_h.clone(),
            domain_x: self.domain_x.clone(),
            prior_c: self.prior_c.iter().map(&f).collect(),
            z_t: self.z_t.map_prob(&f),
            z_r: self.z_r.map_prob(&f),
            y_t: self.y_t.map_prob(&f),
            y_r: self.y_r.map_prob(&f),
            h_t: self.h_t.map_prob(&f),
            h_r: self.h_r.map_prob(&f),
            x_t: self.x_t.map_prob(&f),
            x_r: self.x_r.map_prob(&f),
            shared_mechanisms: self.shared_mechanisms,
        }
    }

    /// Checks every table against the graph and the probability invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |table: &str, reason: String| CgnError::InvalidSpec {
            table: table.to_string(),
            reason,
        };
        for (name, dom) in [
            ("domain_c", &self.domain_c),
            ("domain_h", &self.domain_h),
            ("domain_x", &self.domain_x),
        ] {
            if dom.is_empty() {
                return Err(bad(name, "empty domain".into()));
            }
            let mut d = dom.clone();
            d.sort_unstable();
            d.dedup();
            if d.len() != dom.len() {
                return Err(bad(name, "duplicate domain values".into()));
            }
        }
        check_probabilities("C", &self.prior_c)?;
        if self.prior_c.len() != self.domain_c.len() {
            return Err(bad(
                "C",
                format!(
                    "{} probabilities for {} values",
                    self.prior_c.len(),
                    self.domain_c.len()
                ),
            ));
        }
        for node in &Node::ALL[1..] {
            let m = self.mechanism(*node).expect("non-root node");
            let name = node.name();
            check_probabilities(name, &m.noise)?;
            let rows = self.expected_rows(*node);
            if m.table.len() != rows {
                return Err(bad(
                    name,
                    format!("expected {rows} parent rows, found {}", m.table.len()),
                ));
            }
            let dom = self.domain(*node);
            for (r, row) in m.table.iter().enumerate() {
                if row.len() != m.noise.len() {
                    return Err(bad(
                        name,
                        format!("row {r} has {} entries for {} noise outcomes", row.len(), m.noise.len()),
                    ));
                }
                if let Some(v) = row.iter().find(|v| !dom.contains(v)) {
                    return Err(bad(name, format!("row {r} value {v} outside domain {dom:?}")));
                }
            }
        }
        if self.shared_mechanisms {
            for (t, r) in [(Node::YT, Node::YR), (Node::HT, Node::HR), (Node::XT, Node::XR)] {
                if self.mechanism(t) != self.mechanism(r) {
                    return Err(bad(
                        r.name(),
                        format!("shared_mechanisms set but {} differs from {}", r, t),
                    ));
                }
            }
        }
        Ok(())
    }

    fn compile(&self) -> Result<Compiled<P>> {
        self.validate()?;
        let mut mechs = vec![(vec![P::one()], Vec::new())];
        for node in &Node::ALL[1..] {
            let m = self.mechanism(*node).unwrap();
            let dom = self.domain(*node);
            let table = m
                .table
                .iter()
                .map(|row| row.iter().map(|v| dom.iter().position(|d| d == v).unwrap()).collect())
                .collect();
            mechs.push((m.noise.clone(), table));
        }
        Ok(Compiled {
            nc: self.domain_c.len(),
            nh: self.domain_h.len(),
            nx: self.domain_x.len(),
            prior_c: self.prior_c.clone(),
            mechs,
        })
    }

    fn assignment(&self, idx: &[usize; 9]) -> Assignment {
        Assignment {
            c: self.domain_c[idx[0]],
            z_t: idx[1] as i64,
            z_r: idx[2] as i64,
            y_t: idx[3] as i64,
            y_r: idx[4] as i64,
            h_t: self.domain_h[idx[5]],
            h_r: self.domain_h[idx[6]],
            x_t: self.domain_x[idx[7]],
            x_r: self.domain_x[idx[8]],
        }
    }

    /// Draws one world by ancestral sampling. Deterministic in `seed`.
    pub fn sample_world(&self, seed: u64) -> Result<SampledWorld> {
        let compiled = self.compile()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = [0usize; 9];
        noise[0] = draw(&compiled.prior_c, &mut rng);
        for (i, slot) in noise.iter_mut().enumerate().skip(1) {
            *slot = draw(&compiled.mechs[i].0, &mut rng);
        }
        let values = compiled.evaluate(&noise, None);
        Ok(SampledWorld {
            noise,
            values: self.assignment(&values),
        })
    }

    /// Re-evaluates each node's lookup on the sampled parents and noise.
    pub fn is_consistent(&self, world: &SampledWorld) -> Result<bool> {
        let compiled = self.compile()?;
        let expected = compiled.evaluate(&world.noise, None);
        Ok(self.assignment(&expected) == world.values)
    }

    fn worlds(&self, compiled: &Compiled<P>) -> Vec<World<P>> {
        let sizes: Vec<usize> = (0..9)
            .map(|i| if i == 0 { compiled.nc } else { compiled.mechs[i].0.len() })
            .collect();
        let mut out = Vec::new();
        let mut noise = [0usize; 9];
        loop {
            let mut weight = compiled.prior_c[noise[0]].clone();
            for (mech, &k) in compiled.mechs[1..].iter().zip(&noise[1..]) {
                weight = weight * mech.0[k].clone();
            }
            if weight > P::zero() {
                let values = compiled.evaluate(&noise, None);
                out.push(World { weight, noise, values });
            }
            // odometer increment
            let mut k = 8;
            loop {
                noise[k] += 1;
                if noise[k] < sizes[k] {
                    break;
                }
                noise[k] = 0;
                if k == 0 {
                    return out;
                }
                k -= 1;
            }
        }
    }

    fn evidence_index(&self, evidence: &Evidence) -> Result<(usize, usize)> {
        let h = self
            .domain_h
            .iter()
            .position(|&v| v == evidence.h_t)
            .ok_or_else(|| CgnError::Precondition(format!("h_t = {} outside domain_H", evidence.h_t)))?;
        if evidence.z_t > 1 {
            return Err(CgnError::Precondition(format!("z_t = {} not in {{0,1}}", evidence.z_t)));
        }
        Ok((h, evidence.z_t as usize))
    }

    /// Exact posterior of `node` given the evidence on the target side.
    pub fn conditional_distribution(&self, evidence: &Evidence, node: Node) -> Result<DiscreteDistribution<P>> {
        let compiled = self.compile()?;
        let (h, z) = self.evidence_index(evidence)?;
        let dom = self.domain(node);
        let mut mass = vec![P::zero(); dom.len()];
        let mut total = P::zero();
        for w in self.worlds(&compiled) {
            if w.values[Node::HT.index()] != h || w.values[Node::ZT.index()] != z {
                continue;
            }
            let v = w.values[node.index()];
            mass[v] = mass[v].clone() + w.weight.clone();
            total = total + w.weight;
        }
        normalize(dom, mass, total, evidence)
    }

    /// Name-based variant of [`Self::conditional_distribution`].
    pub fn conditional_distribution_by_name(&self, evidence: &Evidence, node: &str) -> Result<DiscreteDistribution<P>> {
        self.conditional_distribution(evidence, node.parse()?)
    }

    /// `P(H_T had Z_T been z | evidence)` by abduction, action, prediction.
    ///
    /// Abduction keeps every world (cause and all noise outcomes) that
    /// reproduces the evidence, weighted by its prior. The action sets
    /// `Z_T := intervention_z`; prediction re-evaluates `Y_T` and `H_T` with
    /// the abducted noise.
    pub fn counterfactual_distribution(
        &self,
        evidence: &Evidence,
        intervention_z: u8,
    ) -> Result<DiscreteDistribution<P>> {
        if intervention_z > 1 {
            return Err(CgnError::Precondition(format!(
                "intervention z = {intervention_z} not in {{0,1}}"
            )));
        }
        let compiled = self.compile()?;
        let (h, z) = self.evidence_index(evidence)?;
        let mut mass = vec![P::zero(); compiled.nh];
        let mut total = P::zero();
        for w in self.worlds(&compiled) {
            if w.values[Node::HT.index()] != h || w.values[Node::ZT.index()] != z {
                continue;
            }
            let cf = compiled.evaluate(&w.noise, Some(intervention_z as usize));
            let v = cf[Node::HT.index()];
            mass[v] = mass[v].clone() + w.weight.clone();
            total = total + w.weight;
        }
        normalize(self.domain_h.clone(), mass, total, evidence)
    }

    /// Joint probability of the evidence.
    pub fn evidence_probability(&self, evidence: &Evidence) -> Result<P> {
        let compiled = self.compile()?;
        let (h, z) = self.evidence_index(evidence)?;
        Ok(self
            .worlds(&compiled)
            .into_iter()
            .filter(|w| w.values[Node::HT.index()] == h && w.values[Node::ZT.index()] == z)
            .fold(P::zero(), |a, w| a + w.weight))
    }

    /// First positive-probability world with a lesion on both sides, if any.
    pub fn symmetric_prior_violation(&self) -> Result<Option<Assignment>> {
        let compiled = self.compile()?;
        Ok(self
            .worlds(&compiled)
            .into_iter()
            .find(|w| w.values[Node::ZT.index()] == 1 && w.values[Node::ZR.index()] == 1)
            .map(|w| self.assignment(&w.values)))
    }

    /// Checks both counterfactual identities over every possible evidence
    /// value.
    ///
    /// Preconditions: the symmetric prior holds in every world, and the
    /// `Y`/`H` mechanisms carry no unit-level noise (the shared cause is the
    /// only exogenous source they see). A model whose two sides use
    /// different mechanisms is still evaluated; it simply fails.
    pub fn verify_theorem1(&self, tolerance: f64) -> Result<TheoremReport> {
        if let Some(world) = self.symmetric_prior_violation()? {
            return Err(CgnError::Precondition(format!(
                "symmetric prior violated: world {world:?} has lesions on both sides"
            )));
        }
        for node in [Node::YT, Node::YR, Node::HT, Node::HR] {
            if !self.mechanism(node).unwrap().is_noise_free() {
                return Err(CgnError::Precondition(format!(
                    "mechanism {node} depends on unit-level noise; only C may be exogenous below Z"
                )));
            }
        }
        let mut tv_eq2 = P::zero();
        let mut tv_eq3 = P::zero();
        let mut checked = 0;
        for &h in &self.domain_h {
            for z in [0u8, 1] {
                let ev = Evidence { h_t: h, z_t: z };
                if self.evidence_probability(&ev)? <= P::zero() {
                    continue;
                }
                checked += 1;
                let cf = self.counterfactual_distribution(&ev, 0)?;
                let tv = if z == 1 {
                    cf.total_variation(&self.conditional_distribution(&ev, Node::HR)?)
                } else {
                    cf.total_variation(&DiscreteDistribution::point_mass(&self.domain_h, h))
                };
                let slot = if z == 1 { &mut tv_eq2 } else { &mut tv_eq3 };
                if tv > *slot {
                    *slot = tv;
                }
            }
        }
        let tv_eq2 = tv_eq2.to_f64().unwrap_or(f64::NAN);
        let tv_eq3 = tv_eq3.to_f64().unwrap_or(f64::NAN);
        Ok(TheoremReport {
            tv_eq2,
            tv_eq3,
            pass: tv_eq2 <= tolerance && tv_eq3 <= tolerance,
            evidence_checked: checked,
        })
    }
}

impl<P: Probability> Compiled<P> {
    /// Node value indices for a noise configuration, optionally forcing
    /// `Z_T` to an intervened value.
    fn evaluate(&self, noise: &[usize; 9], do_zt: Option<usize>) -> [usize; 9] {
        let mut v = [0usize; 9];
        let c = noise[0];
        v[0] = c;
        let look = |node: Node, row: usize| self.mechs[node.index()].1[row][noise[node.index()]];
        v[1] = do_zt.unwrap_or_else(|| look(Node::ZT, c));
        v[2] = look(Node::ZR, c);
        v[3] = look(Node::YT, c * 2 + v[1]);
        v[4] = look(Node::YR, c * 2 + v[2]);
        v[5] = look(Node::HT, c * 2 + v[3]);
        v[6] = look(Node::HR, c * 2 + v[4]);
        v[7] = look(Node::XT, c * self.nh + v[5]);
        v[8] = look(Node::XR, c * self.nh + v[6]);
        debug_assert!(v[7] < self.nx && v[8] < self.nx);
        v
    }
}

fn check_probabilities<P: Probability>(table: &str, probs: &[P]) -> Result<()> {
    if probs.is_empty() {
        return Err(CgnError::InvalidSpec {
            table: table.to_string(),
            reason: "empty probability vector".into(),
        });
    }
    if probs.iter().any(|p| *p < P::zero()) {
        return Err(CgnError::InvalidSpec {
            table: table.to_string(),
            reason: "negative probability".into(),
        });
    }
    let total = probs.iter().cloned().fold(P::zero(), |a, b| a + b);
    let err = (total - P::one()).abs().to_f64().unwrap_or(f64::INFINITY);
    if err > 1e-12 {
        return Err(CgnError::InvalidSpec {
            table: table.to_string(),
            reason: format!("probabilities sum to 1 ± {err:e}"),
        });
    }
    Ok(())
}

fn normalize<P: Probability>(
    support: Vec<i64>,
    mass: Vec<P>,
    total: P,
    evidence: &Evidence,
) -> Result<DiscreteDistribution<P>> {
    if total <= P::zero() {
        return Err(CgnError::ImpossibleEvidence(format!(
            "P(H_T = {}, Z_T = {}) = 0",
            evidence.h_t, evidence.z_t
        )));
    }
    Ok(DiscreteDistribution {
        support,
        mass: mass.into_iter().map(|m| m / total.clone()).collect(),
    })
}

fn draw<P: Probability, R: Rng>(probs: &[P], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64().unwrap_or(0.0);
        if u < acc {
            return i;
        }
    }
    // rounding slack: last outcome with positive mass
    probs.iter().rposition(|p| *p > P::zero()).unwrap_or(0)
}

/// Converts an `f64` model to exact rationals (each float converts exactly).
pub fn to_exact(spec: &ScmSpec<f64>) -> ScmSpec<ExactProbability> {
    spec.map_prob(|p| BigRational::from_f64(*p).expect("finite probability"))
}

// ---------------------------------------------------------------------------
// Random model families used by tests and the acceptance suite.

/// Random model that satisfies the symmetric prior, shares its `Y`/`H`/`X`
/// mechanisms across sides and keeps `Y`/`H` free of unit-level noise.
///
/// Probabilities are small dyadic fractions, so exact conversion keeps every
/// vector summing to one.
pub fn random_symmetric_spec<R: Rng>(rng: &mut R, n_c: usize, n_h: usize) -> ScmSpec<f64> {
    assert!(n_c >= 1 && n_h >= 1);
    let domain_c: Vec<i64> = (0..n_c as i64).collect();
    let domain_h: Vec<i64> = (0..n_h as i64).map(|v| v * 10).collect();
    let domain_x: Vec<i64> = vec![0, 1, 2];
    let prior_c = dyadic_simplex(rng, n_c);
    // Each cause value decides which side may carry a lesion.
    let mut zt_rows = Vec::new();
    let mut zr_rows = Vec::new();
    for _ in 0..n_c {
        let lesion_on_target: bool = rng.random_bool(0.75);
        let a: i64 = rng.random_range(0..2);
        let b: i64 = rng.random_range(0..2);
        if lesion_on_target {
            zt_rows.push(vec![a, 1]);
            zr_rows.push(vec![0, 0]);
        } else {
            zt_rows.push(vec![0, 0]);
            zr_rows.push(vec![a, b]);
        }
    }
    let z_noise = dyadic_simplex(rng, 2);
    let z_t = Mechanism {
        noise: z_noise.clone(),
        table: zt_rows,
    };
    let z_r = Mechanism {
        noise: dyadic_simplex(rng, 2),
        table: zr_rows,
    };
    let y_table: Vec<i64> = (0..n_c * 2)
        .map(|row| if row % 2 == 1 { 1 } else { rng.random_range(0..2) })
        .collect();
    let y = Mechanism::deterministic(y_table);
    let h_table: Vec<i64> = (0..n_c * 2).map(|_| domain_h[rng.random_range(0..n_h)]).collect();
    let h = Mechanism::deterministic(h_table);
    let x = Mechanism {
        noise: dyadic_simplex(rng, 2),
        table: (0..n_c * n_h)
            .map(|_| vec![rng.random_range(0..3), rng.random_range(0..3)])
            .collect(),
    };
    ScmSpec {
        domain_c,
        domain_h,
        domain_x,
        prior_c,
        z_t,
        z_r,
        y_t: y.clone(),
        y_r: y,
        h_t: h.clone(),
        h_r: h,
        x_t: x.clone(),
        x_r: x,
        shared_mechanisms: true,
    }
}

/// Breaks the shared-mechanism assumption: changes the reference-side
/// `H` entry used by a lesion-compatible cause value under `Z_R = 0`, so
/// the two sides no longer agree. Returns `None` if no cause value admits
/// a target lesion.
pub fn perturb_reference_mechanism<R: Rng>(spec: &ScmSpec<f64>, rng: &mut R) -> Option<ScmSpec<f64>> {
    let n_h = spec.domain_h.len();
    if n_h < 2 {
        return None;
    }
    let candidates: Vec<usize> = (0..spec.domain_c.len())
        .filter(|&c| {
            spec.prior_c[c] > 0.0
                && spec.z_t.table[c]
                    .iter()
                    .zip(&spec.z_t.noise)
                    .any(|(&z, &p)| z == 1 && p > 0.0)
        })
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let c = candidates[rng.random_range(0..candidates.len())];
    let mut out = spec.clone();
    out.shared_mechanisms = false;
    // Y_R under Z_R = 0 for this cause (noise-free by construction)
    let y = spec.y_r.table[c * 2][0] as usize;
    let row = &mut out.h_r.table[c * 2 + y];
    let current = row[0];
    let alternatives: Vec<i64> = spec.domain_h.iter().copied().filter(|&v| v != current).collect();
    let new = alternatives[rng.random_range(0..alternatives.len())];
    for v in row.iter_mut() {
        *v = new;
    }
    Some(out)
}

fn dyadic_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    // n positive multiples of 1/64 summing to 1
    let units = 64usize;
    let mut cuts: Vec<usize> = (0..n - 1).map(|_| rng.random_range(1..units)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(units)) {
        out.push((c - prev) as f64 / units as f64);
        prev = c;
    }
    out
}

// ---------------------------------------------------------------------------
// Structured text (TOML) representation.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MechanismFile {
    noise: Vec<f64>,
    table: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorFile {
    prior: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScmFile {
    domain_c: Vec<i64>,
    domain_h: Vec<i64>,
    domain_x: Vec<i64>,
    #[serde(default)]
    shared_mechanisms: bool,
    c: PriorFile,
    z_t: MechanismFile,
    z_r: MechanismFile,
    y_t: MechanismFile,
    y_r: MechanismFile,
    h_t: MechanismFile,
    h_r: MechanismFile,
    x_t: MechanismFile,
    x_r: MechanismFile,
}

impl From<MechanismFile> for Mechanism<f64> {
    fn from(m: MechanismFile) -> Self {
        Mechanism {
            noise: m.noise,
            table: m.table,
        }
    }
}

impl From<&Mechanism<f64>> for MechanismFile {
    fn from(m: &Mechanism<f64>) -> Self {
        MechanismFile {
            noise: m.noise.clone(),
            table: m.table.clone(),
        }
    }
}

impl ScmSpec<f64> {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScmFile = toml::from_str(text).map_err(|e| CgnError::parse("<scm spec>", e))?;
        let spec = ScmSpec {
            domain_c: file.domain_c,
            domain_h: file.domain_h,
            domain_x: file.domain_x,
            prior_c: file.c.prior,
            z_t: file.z_t.into(),
            z_r: file.z_r.into(),
            y_t: file.y_t.into(),
            y_r: file.y_r.into(),
            h_t: file.h_t.into(),
            h_r: file.h_r.into(),
            x_t: file.x_t.into(),
            x_r: file.x_r.into(),
            shared_mechanisms: file.shared_mechanisms,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ScmFile {
            domain_c: self.domain_c.clone(),
            domain_h: self.domain_h.clone(),
            domain_x: self.domain_x.clone(),
            shared_mechanisms: self.shared_mechanisms,
            c: PriorFile {
                prior: self.prior_c.clone(),
            },
            z_t: (&self.z_t).into(),
            z_r: (&self.z_r).into(),
            y_t: (&self.y_t).into(),
            y_r: (&self.y_r).into(),
            h_t: (&self.h_t).into(),
            h_r: (&self.h_r).into(),
            x_t: (&self.x_t).into(),
            x_r: (&self.x_r).into(),
        };
        toml::to_string(&file).expect("scm spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CgnError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CgnError::Parse { message, .. } => CgnError::parse(path, message),
            other => other,
        })
    }
}
