//! Hierarchical synthetic concept universe and its closed-form Bayes
//! classifier.
//!
//! Subconcepts are isotropic 2-D Gaussians grouped under superclasses. Each
//! concept and superclass owns a condition token; one extra token is the null
//! condition. Because the mixture is known exactly, the Bayes posterior is the
//! evaluation oracle for forgetting and retention metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConceptSpec {
    pub id: usize,
    pub name: String,
    pub superclass_id: usize,
    pub mean: Vec<f64>,
    pub stddev: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Superclass {
    pub id: usize,
    pub name: String,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConceptRegistry {
    pub subconcepts: Vec<ConceptSpec>,
    pub superclasses: Vec<Superclass>,
    pub null_token: usize,
}

impl ConceptRegistry {
    pub fn validate(&self) -> Result<()> {
        let vocab = self.cond_vocab();
        let mut seen = vec![false; vocab];
        let mut mark = |id: usize| -> Result<()> {
            if id >= vocab {
                return Err(Error::contract(format!("token id {id} not dense in [0, {vocab})")));
            }
            if seen[id] {
                return Err(Error::contract(format!("duplicate token id {id}")));
            }
            seen[id] = true;
            Ok(())
        };
        for c in &self.subconcepts {
            mark(c.id)?;
            if c.stddev <= 0.0 {
                return Err(Error::contract("stddev must be positive"));
            }
            if !(c.prior > 0.0 && c.prior < 1.0) {
                return Err(Error::contract("prior must be in (0,1)"));
            }
            if !self.superclasses.iter().any(|s| s.id == c.superclass_id) {
                return Err(Error::contract(format!(
                    "subconcept {} references unknown superclass {}",
                    c.name, c.superclass_id
                )));
            }
        }
        for s in &self.superclasses {
            mark(s.id)?;
            if s.members.len() < 2 {
                return Err(Error::contract(format!("superclass {} has < 2 members", s.name)));
            }
            for &m in &s.members {
                let sub = self
                    .subconcept(m)
                    .ok_or_else(|| Error::contract(format!("member {m} is not a subconcept")))?;
                if sub.superclass_id != s.id {
                    return Err(Error::contract("member/superclass mismatch"));
                }
            }
        }
        mark(self.null_token)?;
        let prior_sum: f64 = self.subconcepts.iter().map(|c| c.prior).sum();
        if (prior_sum - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("priors sum to {prior_sum}, expected 1")));
        }
        Ok(())
    }

    pub fn cond_vocab(&self) -> usize {
        self.subconcepts.len() + self.superclasses.len() + 1
    }

    pub fn data_dim(&self) -> usize {
        self.subconcepts[0].mean.len()
    }

    pub fn subconcept(&self, id: usize) -> Option<&ConceptSpec> {
        self.subconcepts.iter().find(|c| c.id == id)
    }

    pub fn superclass(&self, id: usize) -> Option<&Superclass> {
        self.superclasses.iter().find(|s| s.id == id)
    }

    pub fn superclass_of(&self, concept_id: usize) -> Option<usize> {
        self.subconcept(concept_id).map(|c| c.superclass_id)
    }

    /// Resolve a token by name or decimal id.
    pub fn token_by_name(&self, name: &str) -> Option<usize> {
        if let Ok(id) = name.parse::<usize>() {
            if id < self.cond_vocab() {
                return Some(id);
            }
            return None;
        }
        if name == "null" {
            return Some(self.null_token);
        }
        self.subconcepts
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.id)
            .or_else(|| self.superclasses.iter().find(|s| s.name == name).map(|s| s.id))
    }

    pub fn token_name(&self, id: usize) -> String {
        if id == self.null_token {
            return "null".to_string();
        }
        self.subconcept(id)
            .map(|c| c.name.clone())
            .or_else(|| self.superclass(id).map(|s| s.name.clone()))
            .unwrap_or_else(|| format!("token{id}"))
    }
}

/// 4 superclasses at (±4, ±4), each with two subconcepts offset ±1.2 along x,
/// stddev 0.4, equal priors. Token ids: subconcepts 0..8, superclasses 8..12,
/// null 12.
pub fn default_registry() -> ConceptRegistry {
    let centers = [(4.0, 4.0), (-4.0, 4.0), (-4.0, -4.0), (4.0, -4.0)];
    let super_names = ["north-east", "north-west", "south-west", "south-east"];
    let mut subconcepts = Vec::new();
    let mut superclasses = Vec::new();
    for (k, ((cx, cy), sname)) in centers.iter().zip(super_names).enumerate() {
        let super_id = 8 + k;
        let mut members = Vec::new();
        for (j, off) in [-1.2, 1.2].iter().enumerate() {
            let id = 2 * k + j;
            members.push(id);
            subconcepts.push(ConceptSpec {
                id,
                name: format!("{sname}-{}", if j == 0 { "a" } else { "b" }),
                superclass_id: super_id,
                mean: vec![cx + off, *cy],
                stddev: 0.4,
                prior: 1.0 / 8.0,
            });
        }
        superclasses.push(Superclass {
            id: super_id,
            name: sname.to_string(),
            members,
        });
    }
    let reg = ConceptRegistry {
        subconcepts,
        superclasses,
        null_token: 12,
    };
    debug_assert!(reg.validate().is_ok());
    reg
}

/// i.i.d. draws from the subconcept's Gaussian.
pub fn sample_concept(
    reg: &ConceptRegistry,
    concept_id: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let spec = reg
        .subconcept(concept_id)
        .ok_or_else(|| Error::contract(format!("token {concept_id} is not a subconcept")))?;
    Ok((0..n)
        .map(|_| {
            spec.mean
                .iter()
                .map(|m| m + spec.stddev * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect())
}

/// Posterior over subconcepts, proportional to prior * N(x; mean, stddev^2 I).
/// Computed in log space for numerical stability.
pub fn bayes_posterior(reg: &ConceptRegistry, x: &[f64]) -> Vec<f64> {
    let log_unnorm: Vec<f64> = reg
        .subconcepts
        .iter()
        .map(|c| {
            let d = x.len() as f64;
            let sq: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
            c.prior.ln() - d * c.stddev.ln() - sq / (2.0 * c.stddev * c.stddev)
        })
        .collect();
    let max = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_unnorm.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

/// Argmax of the posterior; ties broken by lowest token id.
pub fn classify(reg: &ConceptRegistry, x: &[f64]) -> usize {
    let post = bayes_posterior(reg, x);
    let mut best = 0;
    for (i, &p) in post.iter().enumerate() {
        if p > post[best] {
            best = i;
        }
    }
    reg.subconcepts[best].id
}

/// Argmax over superclasses of the summed member posteriors; ties broken by
/// lowest token id.
pub fn classify_super(reg: &ConceptRegistry, x: &[f64]) -> usize {
    let post = bayes_posterior(reg, x);
    let mut best: Option<(usize, f64)> = None;
    for s in &reg.superclasses {
        let mass: f64 = s
            .members
            .iter()
            .map(|&m| {
                let idx = reg.subconcepts.iter().position(|c| c.id == m).unwrap();
                post[idx]
            })
            .sum();
        match best {
            None => best = Some((s.id, mass)),
            Some((bid, bmass)) => {
                if mass > bmass || (mass == bmass && s.id < bid) {
                    best = Some((s.id, mass));
                }
            }
        }
    }
    best.unwrap().0
}

pub fn save_registry(reg: &ConceptRegistry, path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(reg)
        .map_err(|e| Error::Config(format!("registry serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_registry(path: &std::path::Path) -> Result<ConceptRegistry> {
    let json = std::fs::read_to_string(path)?;
    let reg: ConceptRegistry =
        serde_json::from_str(&json).map_err(|e| Error::Config(format!("registry parse: {e}")))?;
    reg.validate()?;
    Ok(reg)
}
