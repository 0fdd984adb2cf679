//! Monte Carlo estimate of the parameter set excluded by the small-divisor
//! conditions, over (ω, ν) uniform in [1, 2]^{n+d}.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EigenvalueModel, ExperimentConfig, MeasureConfig};
use crate::error::{Error, Result};
use crate::lattice::{dot, japanese_bracket, ModeSet, C64};
use crate::numeric::{fit_line, wilson_interval, LineFit, Z95};
use crate::pipeline::{run_pipeline, RunStatus, StopAfter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub omega: Vec<f64>,
    pub nu: Vec<f64>,
}

/// Sample i comes from its own ChaCha stream, so any subset can be regenerated alone.
pub fn sample_parameters(seed: u64, count: usize, n: usize, d: usize) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let omega = (0..n).map(|_| rng.random_range(1.0..2.0)).collect();
            let nu = (0..d).map(|_| rng.random_range(1.0..2.0)).collect();
            Sample { omega, nu }
        })
        .collect()
}

/// max(32, 2/γ^{1/τ}) over the γ grid.
pub fn scan_radius(gammas: &[f64], tau: f64) -> i64 {
    gammas
        .iter()
        .map(|g| (2.0 / g.powf(1.0 / tau)).ceil() as i64)
        .fold(32, i64::max)
}

/// min over (l, j) ≠ 0 in the box of |ω·l + ν·j| ⟨(l, j)⟩^τ.
/// The Diophantine check at γ fails exactly when this is ≤ γ.
pub fn diophantine_statistic(omega: &[f64], nu: &[f64], tau: f64, radius: i64) -> f64 {
    let ls = ModeSet::new(omega.len(), radius);
    let js = ModeSet::new(nu.len(), radius);
    let jw: Vec<(f64, i64)> = js.iter().map(|j| (dot(nu, j), j.iter().map(|c| c * c).sum())).collect();
    let mut best = f64::INFINITY;
    for (li, l) in ls.iter().enumerate() {
        let wl = dot(omega, l);
        let l2: i64 = l.iter().map(|c| c * c).sum();
        for (ji, &(nj, j2)) in jw.iter().enumerate() {
            if li == ls.zero_index() && ji == js.zero_index() {
                continue;
            }
            let v = (wl + nj).abs() * ((1 + l2 + j2) as f64).sqrt().powf(tau);
            best = best.min(v);
        }
    }
    best
}

/// min over (l, j, j') ≠ (0, j, j) of |iω·l + λ_j − λ_j'| (⟨l⟩⟨j⟩⟨j'⟩)^τ, with
/// |l|_∞ ≤ l_radius and j, j' ranging over `modes`. The final conditions with
/// constant 2γ fail exactly when this is < 2γ.
pub fn melnikov_statistic(omega: &[f64], lambdas: &[C64], modes: &ModeSet, tau: f64, l_radius: i64) -> f64 {
    let ls = ModeSet::new(omega.len(), l_radius);
    let wj: Vec<f64> = modes.brackets().iter().map(|b| b.powf(tau)).collect();
    let mut best = f64::INFINITY;
    for (li, l) in ls.iter().enumerate() {
        let wl = dot(omega, l);
        let bl = japanese_bracket(l).powf(tau);
        let zero = li == ls.zero_index();
        for (a, la) in lambdas.iter().enumerate() {
            let base = C64::new(la.re, la.im + wl);
            let ba = bl * wj[a];
            for (b, lb) in lambdas.iter().enumerate() {
                if zero && a == b {
                    continue;
                }
                let v = (base - lb).norm() * ba * wj[b];
                best = best.min(v);
            }
        }
    }
    best
}

/// Why a sample was excluded at a given γ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionTag {
    Diophantine,
    Melnikov,
    Pipeline,
}

/// Per-sample statistics; exclusion at every γ follows from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub diophantine: f64,
    pub melnikov: f64,
    /// The full pipeline could not produce eigenvalues.
    pub pipeline_failed: bool,
}

impl SampleStats {
    pub fn exclusion(&self, gamma: f64) -> Option<ExclusionTag> {
        if self.pipeline_failed {
            Some(ExclusionTag::Pipeline)
        } else if self.diophantine <= gamma {
            Some(ExclusionTag::Diophantine)
        } else if self.melnikov < 2.0 * gamma {
            Some(ExclusionTag::Melnikov)
        } else {
            None
        }
    }
}

/// λ_j = iν0·j + z(j) with ν0 = ν + ε⟨V⟩ and z(j) = ε⟨W⟩_j^j.
pub struct FirstOrderModel {
    modes: ModeSet,
    v_mean: Vec<f64>,
    z: Vec<C64>,
    eps: f64,
}

impl FirstOrderModel {
    pub fn new(cfg: &ExperimentConfig, radius: i64) -> Self {
        let (n, d) = (cfg.lattice.n, cfg.lattice.d);
        let eps = cfg.parameters.eps;
        let modes = ModeSet::new(d, radius);
        let zero = vec![0i64; n + d];
        let v_mean = (0..d)
            .map(|c| cfg.v.coefficients(c, &vec![0; n + d]).get(&zero).re)
            .collect();
        let z = cfg
            .w
            .model
            .mean_diagonal(&modes, cfg.parameters.gain)
            .into_iter()
            .map(|v| v * eps)
            .collect();
        Self { modes, v_mean, z, eps }
    }

    pub fn nu0(&self, nu: &[f64]) -> Vec<f64> {
        nu.iter().zip(&self.v_mean).map(|(v, m)| v + self.eps * m).collect()
    }

    pub fn lambdas(&self, nu: &[f64]) -> Vec<C64> {
        let nu0 = self.nu0(nu);
        self.modes
            .iter()
            .zip(&self.z)
            .map(|(j, z)| C64::new(0.0, dot(&nu0, j)) + z)
            .collect()
    }

    pub fn stats(&self, s: &Sample, tau: f64, radius: i64) -> SampleStats {
        SampleStats {
            diophantine: diophantine_statistic(&s.omega, &self.nu0(&s.nu), tau, radius),
            melnikov: melnikov_statistic(&s.omega, &self.lambdas(&s.nu), &self.modes, tau, radius),
            pipeline_failed: false,
        }
    }
}

/// Runs the reduction at the sample point and evaluates the statistics with the
/// computed ν0 and λ^{(∞)} (spatial modes limited to the lattice).
pub fn full_pipeline_stats(cfg: &ExperimentConfig, s: &Sample, radius: i64) -> SampleStats {
    let mut point = cfg.clone();
    point.parameters.omega = s.omega.clone();
    point.parameters.nu = s.nu.clone();
    point.stages.dynamics = false;
    let failed = SampleStats {
        diophantine: f64::NAN,
        melnikov: f64::NAN,
        pipeline_failed: true,
    };
    let Ok(out) = run_pipeline(&point, StopAfter::Kam, &[]) else {
        return failed;
    };
    // a failed 2γ check at the configured γ still leaves usable eigenvalues
    let usable = match &out.report.status {
        RunStatus::Completed => true,
        RunStatus::Excluded { stage, .. } => *stage == crate::pipeline::Stage::Cantor,
        RunStatus::Failed { .. } => false,
    };
    let (Some(spectrum), Some(st), true) = (out.spectrum(), out.straightening.as_ref(), usable) else {
        return failed;
    };
    let tau = cfg.parameters.tau;
    SampleStats {
        diophantine: diophantine_statistic(&s.omega, &st.nu0, tau, radius),
        melnikov: melnikov_statistic(&s.omega, &spectrum.lambdas(), &spectrum.spec.spatial(), tau, radius),
        pipeline_failed: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub gamma: f64,
    pub samples: usize,
    pub excluded: usize,
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub tags: BTreeMap<ExclusionTag, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub checked: usize,
    /// Per γ, samples where the two models disagree on exclusion.
    pub disagreements: Vec<usize>,
    pub max_gap: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub model: EigenvalueModel,
    pub seed: u64,
    pub radius: i64,
    pub rows: Vec<MeasureRow>,
    /// Regression of log fraction on log γ over the rows with a nonzero fraction.
    pub slope: Option<LineFit>,
    pub spot_check: Option<SpotCheck>,
}

impl MeasureReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("gamma,samples,excluded_count,fraction,ci_low,ci_high,diophantine,melnikov,pipeline\n");
        for r in &self.rows {
            let tag = |t| r.tags.get(&t).copied().unwrap_or(0);
            let _ = writeln!(
                out,
                "{:e},{},{},{:e},{:e},{:e},{},{},{}",
                r.gamma,
                r.samples,
                r.excluded,
                r.fraction,
                r.ci_low,
                r.ci_high,
                tag(ExclusionTag::Diophantine),
                tag(ExclusionTag::Melnikov),
                tag(ExclusionTag::Pipeline)
            );
        }
        out
    }
}

pub fn tabulate(stats: &[SampleStats], gammas: &[f64]) -> Vec<MeasureRow> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut tags = BTreeMap::new();
            for t in stats.iter().filter_map(|s| s.exclusion(gamma)) {
                *tags.entry(t).or_insert(0) += 1;
            }
            let excluded: usize = tags.values().sum();
            let (ci_low, ci_high) = wilson_interval(excluded, stats.len(), Z95);
            MeasureRow {
                gamma,
                samples: stats.len(),
                excluded,
                fraction: excluded as f64 / stats.len() as f64,
                ci_low,
                ci_high,
                tags,
            }
        })
        .collect()
}

pub fn excluded_fraction(cfg: &ExperimentConfig) -> Result<MeasureReport> {
    cfg.validate()?;
    let mc: MeasureConfig = cfg
        .measure
        .clone()
        .ok_or_else(|| Error::Config("the config has no [measure] section".into()))?;
    let tau = cfg.parameters.tau;
    let radius = mc.radius.unwrap_or_else(|| scan_radius(&mc.gammas, tau));
    let samples = sample_parameters(cfg.seed, mc.samples, cfg.lattice.n, cfg.lattice.d);
    let first = FirstOrderModel::new(cfg, radius);
    let primary: Vec<SampleStats> = samples
        .par_iter()
        .map(|s| match mc.model {
            EigenvalueModel::FirstOrder => first.stats(s, tau, radius),
            EigenvalueModel::FullPipeline => full_pipeline_stats(cfg, s, radius),
        })
        .collect();
    let rows = tabulate(&primary, &mc.gammas);
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.fraction > 0.0)
        .map(|r| (r.gamma.ln(), r.fraction.ln()))
        .unzip();
    let slope = fit_line(&xs, &ys);

    let spot_check = if mc.model == EigenvalueModel::FirstOrder && mc.spot_check_fraction > 0.0 {
        let stride = (1.0 / mc.spot_check_fraction).round().max(1.0) as usize;
        let picked: Vec<usize> = (0..samples.len()).step_by(stride).collect();
        let full: Vec<SampleStats> = picked
            .par_iter()
            .map(|&i| full_pipeline_stats(cfg, &samples[i], radius))
            .collect();
        let disagreements: Vec<usize> = mc
            .gammas
            .iter()
            .map(|&g| {
                picked
                    .iter()
                    .zip(&full)
                    .filter(|&(&i, f)| primary[i].exclusion(g).is_some() != f.exclusion(g).is_some())
                    .count()
            })
            .collect();
        let max_gap = disagreements.iter().map(|&c| c as f64 / picked.len() as f64).fold(0.0, f64::max);
        Some(SpotCheck {
            checked: picked.len(),
            disagreements,
            max_gap,
            ok: max_gap <= mc.max_model_gap,
        })
    } else {
        None
    };

    Ok(MeasureReport {
        model: mc.model,
        seed: cfg.seed,
        radius,
        rows,
        slope,
        spot_check,
    })
}

/// Finite-difference quotients at ω̃ and ω̃ + h (h stacks the ω then the ν increments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LipschitzProbe {
    Measured {
        step: f64,
        /// (ν0(ω̃+h) − ν0(ω̃)) / |h| per component.
        nu0_quotient: Vec<f64>,
        z_quotient: f64,
        /// max_j ⟨j⟩^{weight} |Δρ_j| / |h|.
        rho_weighted_quotient: f64,
        weight: f64,
    },
    Skipped {
        reason: String,
    },
}

pub fn lipschitz_probe(cfg: &ExperimentConfig, h: &[f64], weight: f64) -> Result<LipschitzProbe> {
    let (n, d) = (cfg.lattice.n, cfg.lattice.d);
    if h.len() != n + d {
        return Err(Error::SizeMismatch {
            expected: n + d,
            found: h.len(),
        });
    }
    let step = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(step > 0.0) {
        return Err(Error::Config("the probe step must be nonzero".into()));
    }
    let mut base = cfg.clone();
    base.stages.dynamics = false;
    let mut moved = base.clone();
    for (o, dh) in moved.parameters.omega.iter_mut().zip(&h[..n]) {
        *o += dh;
    }
    for (v, dh) in moved.parameters.nu.iter_mut().zip(&h[n..]) {
        *v += dh;
    }
    let a = run_pipeline(&base, StopAfter::Kam, &[])?;
    let b = run_pipeline(&moved, StopAfter::Kam, &[])?;
    for (name, out) in [("base", &a), ("shifted", &b)] {
        if !out.report.status.is_completed() {
            return Ok(LipschitzProbe::Skipped {
                reason: format!("{name} point left the Cantor set or failed: {:?}", out.report.status),
            });
        }
    }
    let (sa, sb) = (a.spectrum().expect("completed"), b.spectrum().expect("completed"));
    let (na, nb) = (&a.straightening.as_ref().expect("completed").nu0, &b.straightening.as_ref().expect("completed").nu0);
    let sp = sa.spec.spatial();
    let z_quotient = sa.z.iter().zip(&sb.z).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / step;
    let rho_weighted_quotient = (0..sp.len())
        .map(|i| sp.bracket(i).powf(weight) * (sa.rho[i] - sb.rho[i]).norm())
        .fold(0.0, f64::max)
        / step;
    Ok(LipschitzProbe::Measured {
        step,
        nu0_quotient: na.iter().zip(nb).map(|(x, y)| (y - x) / step).collect(),
        z_quotient,
        rho_weighted_quotient,
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::DESK;
    use crate::kam::melnikov_margin;
    use crate::straighten::diophantine_check;

    #[test]
    fn samples_are_reproducible_and_uniform() {
        let a = sample_parameters(11, 4000, 1, 1);
        assert_eq!(a, sample_parameters(11, 4000, 1, 1));
        assert_ne!(a, sample_parameters(12, 4000, 1, 1));
        assert_eq!(a[..10], sample_parameters(11, 10, 1, 1)[..]);
        let all: Vec<f64> = a.iter().flat_map(|s| s.omega.iter().chain(&s.nu).copied()).collect();
        assert!(all.iter().all(|v| (1.0..2.0).contains(v)));
        for coord in 0..2 {
            let mean = a.iter().map(|s| if coord == 0 { s.omega[0] } else { s.nu[0] }).sum::<f64>() / 4000.0;
            assert!((mean - 1.5).abs() < 3.0 / 4000f64.sqrt(), "{mean}");
        }
    }

    #[test]
    fn radius_rule() {
        assert_eq!(scan_radius(&[0.2, 0.025], 3.0), 32);
        assert_eq!(scan_radius(&[1e-6], 3.0), 200);
    }

    #[test]
    fn eps_zero_matches_direct_checks() {
        let radius = 6;
        let tau = 3.0;
        let modes = ModeSet::new(1, radius);
        for s in sample_parameters(3, 40, 1, 1) {
            let lambdas: Vec<C64> = modes.iter().map(|j| C64::new(0.0, s.nu[0] * j[0] as f64)).collect();
            let stats = SampleStats {
                diophantine: diophantine_statistic(&s.omega, &s.nu, tau, radius),
                melnikov: melnikov_statistic(&s.omega, &lambdas, &modes, tau, radius),
                pipeline_failed: false,
            };
            for gamma in [0.2, 0.1, 0.05] {
                let dio_ok = diophantine_check(&s.omega, &s.nu, gamma, tau, radius, radius).ok;
                let ls = ModeSet::new(1, radius);
                let mel_ok = ls.iter().all(|l| {
                    (0..modes.len()).all(|a| (0..modes.len()).all(|b| melnikov_margin(&lambdas, &modes, &s.omega, l, a, b, 2.0 * gamma, tau) >= 0.0))
                });
                assert_eq!(stats.exclusion(gamma).is_none(), dio_ok && mel_ok, "{s:?} γ={gamma}");
            }
        }
    }

    #[test]
    fn exclusion_is_monotone_in_gamma() {
        let stats: Vec<SampleStats> = sample_parameters(5, 200, 1, 1)
            .iter()
            .map(|s| SampleStats {
                diophantine: diophantine_statistic(&s.omega, &s.nu, 3.0, 8),
                melnikov: 1.0,
                pipeline_failed: false,
            })
            .collect();
        let rows = tabulate(&stats, &[0.025, 0.05, 0.1, 0.2]);
        assert!(rows.windows(2).all(|w| w[0].excluded <= w[1].excluded));
        assert!(rows.iter().all(|r| r.ci_low <= r.fraction && r.fraction <= r.ci_high));
    }

    #[test]
    fn small_measure_run_is_deterministic() {
        let text = format!("{DESK}\n[measure]\nsamples = 100\nradius = 8\nspot_check_fraction = 0.0\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let a = excluded_fraction(&cfg).unwrap();
        assert_eq!(a, excluded_fraction(&cfg).unwrap());
        assert_eq!(a.rows.len(), 4);
        assert!(a.csv().starts_with("gamma,samples,excluded_count"));
    }

    #[test]
    fn lipschitz_probe_at_eps_zero_is_the_identity() {
        let cfg = ExperimentConfig::with_overrides(DESK, &["parameters.eps=0.0".into()]).unwrap();
        match lipschitz_probe(&cfg, &[0.0, 1e-3], 2.0).unwrap() {
            LipschitzProbe::Measured { nu0_quotient, z_quotient, .. } => {
                assert!((nu0_quotient[0] - 1.0).abs() < 1e-9);
                assert_eq!(z_quotient, 0.0);
            }
            other => panic!("{other:?}"),
        }
        match lipschitz_probe(&cfg, &[1e-3, 0.0], 2.0).unwrap() {
            LipschitzProbe::Measured { nu0_quotient, .. } => assert_eq!(nu0_quotient[0], 0.0),
            other => panic!("{other:?}"),
        }
    }
}
