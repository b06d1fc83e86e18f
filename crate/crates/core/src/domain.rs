//! Domain pools on disk.
//!
//! A domain directory holds `domain.json` (`domain/v1`: tag, true weight
//! proportions, prior half-spaces, discount, horizon, interaction budget)
//! plus a directory of teaching environments and one of held-out test
//! environments, each an `env/v1` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bec::{policy_bec, scaffold_kcs, ConstraintSet, HalfSpaceConstraint, KcBank};
use crate::error::{Error, Result};
use crate::mdp::{DomainTag, GridEnvironment, MDPSpec, RewardWeights};
use crate::sphere::Vec3;

pub const DOMAIN_SCHEMA: &str = "domain/v1";
pub const MANIFEST: &str = "domain.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub schema: String,
    pub tag: DomainTag,
    /// Proportions of the true weights; normalized on load.
    pub weights: [f64; 3],
    /// Normals of the prior half-spaces (`w . n >= 0`).
    #[serde(default)]
    pub prior: Vec<[f64; 3]>,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Fixed horizon; per-environment default when absent.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Demonstrations plus tests per session.
    pub budget: usize,
    #[serde(default = "teach_dir")]
    pub teach: String,
    #[serde(default = "heldout_dir")]
    pub heldout: String,
}

fn one() -> f64 {
    1.0
}
fn teach_dir() -> String {
    "teach".into()
}
fn heldout_dir() -> String {
    "heldout".into()
}

#[derive(Clone, Debug)]
pub struct Domain {
    pub manifest: DomainManifest,
    pub dir: PathBuf,
    pub weights: RewardWeights<f64>,
    pub prior: ConstraintSet<f64>,
    pub teach: Vec<Arc<GridEnvironment>>,
    pub heldout: Vec<Arc<GridEnvironment>>,
}

impl Domain {
    pub fn tag(&self) -> DomainTag {
        self.manifest.tag
    }

    pub fn name(&self) -> &'static str {
        self.manifest.tag.as_str()
    }

    pub fn spec(&self, env: &Arc<GridEnvironment>) -> MDPSpec<f64> {
        MDPSpec {
            env: env.clone(),
            weights: self.weights,
            gamma: self.manifest.gamma,
            horizon: self.manifest.horizon.unwrap_or_else(|| env.default_horizon()),
        }
    }

    pub fn teach_specs(&self) -> Vec<MDPSpec<f64>> {
        self.teach.iter().map(|e| self.spec(e)).collect()
    }

    pub fn heldout_specs(&self) -> Vec<MDPSpec<f64>> {
        self.heldout.iter().map(|e| self.spec(e)).collect()
    }

    /// Minimal BEC of the teaching pool grouped into lessons.
    pub fn kc_bank(&self) -> Result<KcBank> {
        let bec = policy_bec(&self.teach_specs(), &self.prior)?;
        let names = self.tag().feature_names();
        let lessons = scaffold_kcs(&bec, &self.prior, names);
        Ok(KcBank::new(self.name(), names, &self.weights, self.prior.clone(), lessons))
    }

    /// Builds a domain from parts already in memory.
    pub fn from_parts(
        manifest: DomainManifest,
        teach: Vec<GridEnvironment>,
        heldout: Vec<GridEnvironment>,
    ) -> Result<Self> {
        let (weights, prior) = check_manifest(&manifest, "<memory>")?;
        let d = Self {
            manifest,
            dir: PathBuf::new(),
            weights,
            prior,
            teach: teach.into_iter().map(Arc::new).collect(),
            heldout: heldout.into_iter().map(Arc::new).collect(),
        };
        d.check_pools("<memory>")?;
        Ok(d)
    }

    fn check_pools(&self, path: &str) -> Result<()> {
        if self.teach.is_empty() {
            return Err(Error::EmptyPool);
        }
        for e in self.teach.iter().chain(&self.heldout) {
            if e.domain() != self.tag() {
                return Err(Error::InvalidEnvironment {
                    id: e.id().into(),
                    reason: format!("{} environment in {} pool", e.domain().as_str(), self.name()),
                });
            }
        }
        for h in &self.heldout {
            if let Some(t) = self.teach.iter().find(|t| t.id() == h.id() || same_layout(t, h)) {
                return Err(Error::Parse {
                    path: path.into(),
                    message: format!("held-out {} duplicates teaching environment {}", h.id(), t.id()),
                });
            }
        }
        Ok(())
    }
}

fn same_layout(a: &GridEnvironment, b: &GridEnvironment) -> bool {
    a.width() == b.width()
        && a.height() == b.height()
        && a.start_state() == b.start_state()
        && a.goal() == b.goal()
        && a.cells() == b.cells()
}

fn check_manifest(m: &DomainManifest, path: &str) -> Result<(RewardWeights<f64>, ConstraintSet<f64>)> {
    let mut errs = Vec::new();
    if m.schema != DOMAIN_SCHEMA {
        errs.push(format!("{path}: unsupported schema {:?}, expected {DOMAIN_SCHEMA}", m.schema));
    }
    if !(m.gamma > 0.0 && m.gamma <= 1.0) {
        errs.push(format!("{path}: gamma {} outside (0, 1]", m.gamma));
    }
    if m.budget == 0 {
        errs.push(format!("{path}: budget must be positive"));
    }
    if m.horizon == Some(0) {
        errs.push(format!("{path}: horizon must be positive"));
    }
    let weights = RewardWeights::from_proportions(Vec3::from_f64(m.weights));
    if weights.is_err() {
        errs.push(format!("{path}: weights must not be all zero"));
    }
    let mut prior = ConstraintSet::new();
    for n in &m.prior {
        match HalfSpaceConstraint::new(Vec3::from_f64(*n), crate::bec::Provenance::Prior) {
            Some(c) => {
                prior.insert(c);
            }
            None => errs.push(format!("{path}: zero prior normal")),
        }
    }
    if let Ok(w) = &weights {
        if !prior.iter().all(|c| c.satisfied_by(&w.vector())) {
            errs.push(format!("{path}: prior excludes the true weights"));
        }
    }
    if errs.is_empty() {
        Ok((weights.unwrap(), prior))
    } else {
        Err(Error::InvalidConfig(errs))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

pub fn load_env(path: &Path) -> Result<GridEnvironment> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })
}

/// Every `*.json` file in `dir`, sorted by id. Ids must be unique.
pub fn load_pool(dir: &Path) -> Result<Vec<GridEnvironment>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut envs = paths.iter().map(|p| load_env(p)).collect::<Result<Vec<_>>>()?;
    envs.sort_by(|a, b| a.id().cmp(b.id()));
    if let Some(w) = envs.windows(2).find(|w| w[0].id() == w[1].id()) {
        return Err(Error::Parse {
            path: dir.display().to_string(),
            message: format!("duplicate environment id {}", w[0].id()),
        });
    }
    Ok(envs)
}

pub fn load_domain(dir: &Path) -> Result<Domain> {
    let mpath = dir.join(MANIFEST);
    let manifest: DomainManifest = serde_json::from_str(&read(&mpath)?)
        .map_err(|e| Error::Parse { path: mpath.display().to_string(), message: e.to_string() })?;
    let (weights, prior) = check_manifest(&manifest, &mpath.display().to_string())?;
    let teach = load_pool(&dir.join(&manifest.teach))?;
    let heldout_dir = dir.join(&manifest.heldout);
    let heldout = if heldout_dir.exists() { load_pool(&heldout_dir)? } else { Vec::new() };
    let d = Domain {
        manifest,
        dir: dir.to_path_buf(),
        weights,
        prior,
        teach: teach.into_iter().map(Arc::new).collect(),
        heldout: heldout.into_iter().map(Arc::new).collect(),
    };
    d.check_pools(&dir.display().to_string())?;
    Ok(d)
}

/// Every subdirectory of `root` holding a manifest, keyed by domain name.
pub fn load_domains(root: &Path) -> Result<BTreeMap<String, Domain>> {
    let entries = fs::read_dir(root).map_err(|source| Error::Io { path: root.display().to_string(), source })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    let mut out = BTreeMap::new();
    for d in dirs {
        let dom = load_domain(&d)?;
        let name = dom.name().to_string();
        if out.insert(name.clone(), dom).is_some() {
            return Err(Error::Parse { path: d.display().to_string(), message: format!("second {name} domain") });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(out)
}
