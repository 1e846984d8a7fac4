//! Fuzzy rule engine for grading how anomalous a region looks.
//!
//! A rule grades a region as `tv * min_j F_j(v_j)` over its antecedents and
//! the knowledge base takes the maximum over rules.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::error::{KistError, Result};
use crate::regions::{Gammas, Property, RegionProperties};

pub const KOLE_MVTEC_RULES: &str = include_str!("../rules/kole_mvtec.rules");
pub const MTD_RULES: &str = include_str!("../rules/mtd.rules");

/// Trapezoidal membership function with breakpoints `a <= b <= c <= d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapezoidMF {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl TrapezoidMF {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let ordered = a <= b && b <= c && c <= d;
        if !ordered || ![a, b, c, d].iter().all(|v| v.is_finite()) {
            return Err(KistError::param(
                "trapezoid",
                format!("breakpoints ({a}, {b}, {c}, {d}) must be finite and non-decreasing"),
            ));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn breakpoints(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn membership(&self, v: f64) -> f64 {
        if v < self.a || v > self.d {
            0.0
        } else if v >= self.b && v <= self.c {
            1.0
        } else if v < self.b {
            (v - self.a) / (self.b - self.a)
        } else {
            (self.d - v) / (self.d - self.c)
        }
    }
}

/// Free-function form of [`TrapezoidMF::membership`].
pub fn membership(mf: &TrapezoidMF, v: f64) -> f64 {
    mf.membership(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Antecedent {
    pub property: Property,
    pub set: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyRule {
    antecedents: Vec<Antecedent>,
    truth_value: f64,
}

impl FuzzyRule {
    pub fn new(antecedents: Vec<Antecedent>, truth_value: f64) -> Result<Self> {
        if antecedents.is_empty() {
            return Err(KistError::param("antecedents", "a rule needs at least one"));
        }
        let distinct: BTreeSet<Property> = antecedents.iter().map(|a| a.property).collect();
        if distinct.len() != antecedents.len() {
            return Err(KistError::param("antecedents", "property repeated within a rule"));
        }
        if !(truth_value > 0.0 && truth_value <= 1.0) {
            return Err(KistError::param("tv", format!("{truth_value} outside (0, 1]")));
        }
        Ok(Self {
            antecedents,
            truth_value,
        })
    }

    pub fn antecedents(&self) -> &[Antecedent] {
        &self.antecedents
    }

    pub fn truth_value(&self) -> f64 {
        self.truth_value
    }
}

/// Membership functions, scale factors and rules.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    membership: BTreeMap<String, TrapezoidMF>,
    gammas: Gammas,
    rules: Vec<FuzzyRule>,
}

impl KnowledgeBase {
    pub fn new(
        membership: BTreeMap<String, TrapezoidMF>,
        gammas: Gammas,
        rules: Vec<FuzzyRule>,
    ) -> Result<Self> {
        if rules.is_empty() {
            return Err(KistError::param("rules", "knowledge base needs at least one rule"));
        }
        for (i, rule) in rules.iter().enumerate() {
            for a in &rule.antecedents {
                if !membership.contains_key(&a.set) {
                    return Err(KistError::RuleSchema {
                        context: format!("rules[{i}]"),
                        reason: format!("undefined fuzzy set `{}`", a.set),
                    });
                }
            }
        }
        Ok(Self {
            membership,
            gammas,
            rules,
        })
    }

    /// Rule set for the Kolektor/MVTec-style textures.
    pub fn kole_mvtec() -> Self {
        parse_knowledge_base(KOLE_MVTEC_RULES).expect("shipped rule file is valid")
    }

    /// Rule set for magnetic-tile-style images.
    pub fn mtd() -> Self {
        parse_knowledge_base(MTD_RULES).expect("shipped rule file is valid")
    }

    pub fn rules(&self) -> &[FuzzyRule] {
        &self.rules
    }

    pub fn gammas(&self) -> &Gammas {
        &self.gammas
    }

    pub fn fuzzy_set(&self, name: &str) -> Option<&TrapezoidMF> {
        self.membership.get(name)
    }

    pub fn max_truth_value(&self) -> f64 {
        self.rules.iter().map(|r| r.truth_value).fold(0.0, f64::max)
    }

    /// `tv * min` of antecedent memberships on the standardized values.
    pub fn rule_grade(&self, rule: &FuzzyRule, props: &RegionProperties) -> Result<f64> {
        let mut weakest = f64::INFINITY;
        for a in &rule.antecedents {
            let mf = self.membership.get(&a.set).ok_or_else(|| KistError::RuleSchema {
                context: format!("antecedent {}", a.property),
                reason: format!("undefined fuzzy set `{}`", a.set),
            })?;
            weakest = weakest.min(mf.membership(props.standardized.get(a.property)));
        }
        Ok(rule.truth_value * weakest)
    }

    pub fn rule_grades(&self, props: &RegionProperties) -> Vec<f64> {
        self.rules
            .iter()
            .map(|r| self.rule_grade(r, props).expect("rule sets validated at construction"))
            .collect()
    }

    /// Maximum over rules of the rule grade.
    pub fn anomaly_grade(&self, props: &RegionProperties) -> f64 {
        self.rule_grades(props).into_iter().fold(0.0, f64::max)
    }
}

pub fn rule_grade(rule: &FuzzyRule, kb: &KnowledgeBase, props: &RegionProperties) -> Result<f64> {
    kb.rule_grade(rule, props)
}

pub fn anomaly_grade(kb: &KnowledgeBase, props: &RegionProperties) -> f64 {
    kb.anomaly_grade(props)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    gammas: BTreeMap<String, f64>,
    membership: BTreeMap<String, [f64; 4]>,
    rules: Vec<RuleEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleEntry {
    #[serde(rename = "if")]
    antecedents: Vec<AntecedentEntry>,
    tv: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AntecedentEntry {
    prop: String,
    set: String,
}

fn schema(context: impl Into<String>, reason: impl Into<String>) -> KistError {
    KistError::RuleSchema {
        context: context.into(),
        reason: reason.into(),
    }
}

/// Parses a JSON rule file. Gammas not listed keep their defaults.
pub fn parse_knowledge_base(text: &str) -> Result<KnowledgeBase> {
    let file: RuleFile = serde_json::from_str(text).map_err(|e| {
        schema(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;

    let mut gamma_values = Gammas::default().values();
    for (name, value) in &file.gammas {
        let p: Property = name
            .parse()
            .map_err(|_| schema(format!("gammas.{name}"), "unknown property"))?;
        gamma_values.set(p, *value);
    }
    let gammas = Gammas::new(gamma_values).map_err(|e| schema("gammas", e.to_string()))?;

    let mut membership = BTreeMap::new();
    for (name, [a, b, c, d]) in file.membership {
        let mf = TrapezoidMF::new(a, b, c, d)
            .map_err(|e| schema(format!("membership.{name}"), e.to_string()))?;
        membership.insert(name, mf);
    }

    let mut rules = Vec::with_capacity(file.rules.len());
    for (i, entry) in file.rules.into_iter().enumerate() {
        let mut antecedents = Vec::with_capacity(entry.antecedents.len());
        for (j, a) in entry.antecedents.into_iter().enumerate() {
            let ctx = format!("rules[{i}].if[{j}]");
            let property = a
                .prop
                .parse()
                .map_err(|_| schema(format!("{ctx}.prop"), format!("unknown property `{}`", a.prop)))?;
            if !membership.contains_key(&a.set) {
                return Err(schema(format!("{ctx}.set"), format!("unknown fuzzy set `{}`", a.set)));
            }
            antecedents.push(Antecedent { property, set: a.set });
        }
        let rule = FuzzyRule::new(antecedents, entry.tv)
            .map_err(|e| schema(format!("rules[{i}]"), e.to_string()))?;
        rules.push(rule);
    }
    KnowledgeBase::new(membership, gammas, rules)
}
