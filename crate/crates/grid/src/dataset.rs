//! Scenario sampling around a base case and TDS-based stability labels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{FaultScenario, FeatureClass, Injections, PowerSystemCase};
use crate::tds::{compute_tsi, simulate};
use crate::{GridError, Result};

/// Relative half-ranges per device class, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPercents {
    pub ibr: f64,
    pub sg: f64,
    pub load: f64,
}

impl ClassPercents {
    pub fn get(&self, class: FeatureClass) -> f64 {
        match class {
            FeatureClass::Ibr => self.ibr,
            FeatureClass::Sg => self.sg,
            FeatureClass::Load => self.load,
        }
    }

    /// Parses `ibr=20,sg=8,load=10`; missing classes default to 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self { ibr: 0.0, sg: 0.0, load: 0.0 };
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| GridError::InvalidConfig(format!("expected class=value, got '{part}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| GridError::InvalidConfig(format!("bad percent '{v}'")))?;
            match k.trim() {
                "ibr" => out.ibr = v,
                "sg" => out.sg = v,
                "load" => out.load = v,
                other => return Err(GridError::InvalidConfig(format!("unknown class '{other}'"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSampler {
    pub ranges: ClassPercents,
    pub count: usize,
    pub seed: u64,
}

impl ScenarioSampler {
    pub fn validate(&self) -> Result<()> {
        let r = self.ranges;
        if [r.ibr, r.sg, r.load].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(GridError::InvalidConfig("ranges must be finite and non-negative".into()));
        }
        if self.count == 0 {
            return Err(GridError::InvalidConfig("sample count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws feature vectors `[P_IBR, P_SG, Pd, Qd]` uniformly within the class
/// ranges around `base` (which should carry the solved slack output). SG
/// outputs are then rescaled so total generation covers load plus the base
/// case losses; negative powers are clamped to 0.
pub fn sample_scenarios(
    case: &PowerSystemCase,
    base: &Injections,
    sampler: &ScenarioSampler,
) -> Result<Vec<Vec<f64>>> {
    sampler.validate()?;
    base.check(case)?;
    let classes = case.feature_classes();
    let x0 = base.features();
    let (ni, ng, nl) = (case.ibrs.len(), case.generators.len(), case.loads.len());
    let losses = base.p_sg.iter().sum::<f64>() + base.p_ibr.iter().sum::<f64>() - base.pd.iter().sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut clamped = 0usize;
    let mut out = Vec::with_capacity(sampler.count);
    for _ in 0..sampler.count {
        let mut x: Vec<f64> = x0
            .iter()
            .zip(&classes)
            .map(|(&v, &c)| {
                let r = sampler.ranges.get(c) / 100.0;
                let u: f64 = rng.gen_range(-1.0..=1.0);
                v * (1.0 + r * u)
            })
            .collect();
        // P_IBR, P_SG and Pd are non-negative by construction of the ranges
        // only when r <= 100 %; clamp the rest
        let nonneg = ni + ng + nl;
        for v in x.iter_mut().take(nonneg) {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        for (k, r) in case.ibrs.iter().enumerate() {
            x[k] = x[k].min(r.s_rated);
        }
        let load: f64 = x[ni + ng..ni + ng + nl].iter().sum();
        let ibr: f64 = x[..ni].iter().sum();
        let target = load + losses - ibr;
        let sg: f64 = x[ni..ni + ng].iter().sum();
        if sg > 0.0 && target > 0.0 {
            let f = target / sg;
            x[ni..ni + ng].iter_mut().for_each(|v| *v *= f);
        }
        out.push(x);
    }
    if clamped > 0 {
        log::warn!("{clamped} sampled powers were negative and clamped to 0");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Features with the slack SG entry replaced by its solved output.
    pub x: Vec<f64>,
    pub tsi: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Scenarios dropped because power flow or the network reduction failed.
    pub dropped: usize,
}

/// TSI and stability label of one operating point.
pub fn label_point(case: &PowerSystemCase, inj: &Injections, fault: &FaultScenario) -> Result<(Injections, f64)> {
    let (pf, traj) = simulate(case, inj, fault)?;
    Ok((pf.resolved(inj), compute_tsi(&traj)?))
}

/// Labels every scenario by simulation, in parallel, keeping input order.
pub fn label_dataset(case: &PowerSystemCase, scenarios: &[Vec<f64>], fault: &FaultScenario) -> Result<Dataset> {
    fault.validate(case)?;
    let results: Vec<Option<Sample>> = scenarios
        .par_iter()
        .map(|x| {
            let inj = Injections::from_features(case, x).ok()?;
            match label_point(case, &inj, fault) {
                Ok((resolved, tsi)) => Some(Sample {
                    x: resolved.features(),
                    tsi,
                    stable: tsi > 0.0,
                }),
                Err(e) => {
                    log::debug!("scenario dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let dropped = results.iter().filter(|r| r.is_none()).count();
    let samples: Vec<Sample> = results.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(GridError::AllInfeasible(dropped));
    }
    Ok(Dataset {
        names: case.feature_names(),
        samples,
        dropped,
    })
}

impl Dataset {
    pub fn unstable_fraction(&self) -> f64 {
        let n = self.samples.iter().filter(|s| !s.stable).count();
        n as f64 / self.samples.len().max(1) as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.names.clone();
        header.push("tsi".into());
        header.push("stable".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            rec.push(s.tsi.to_string());
            rec.push(u8::from(s.stable).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[header.len() - 2] != "tsi" || header[header.len() - 1] != "stable" {
            return Err(GridError::InvalidConfig("dataset header must end with tsi,stable".into()));
        }
        let nx = header.len() - 2;
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| GridError::InvalidConfig(format!("bad number in dataset: {e}")))?;
            samples.push(Sample {
                x: vals[..nx].to_vec(),
                tsi: vals[nx],
                stable: vals[nx + 1] != 0.0,
            });
        }
        Ok(Self {
            names: header[..nx].to_vec(),
            samples,
            dropped: 0,
        })
    }
}
