//! The acc_aux quadruple, the valid-baseline check and the bounds on the
//! natural indirect effect of the LM representations.

use serde::{Deserialize, Serialize};

/// z for a two-sided 95% normal interval.
const Z95: f64 = 1.959_963_984_540_054;

/// A point estimate with a 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

impl Estimate {
    /// An estimate with a degenerate interval.
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            ci_lo: value,
            ci_hi: value,
            n: 0,
        }
    }

    /// Standard error implied by the interval width.
    pub fn std_error(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / (2.0 * Z95)
    }

    pub fn excludes_zero(&self) -> bool {
        self.ci_lo > 0.0 || self.ci_hi < 0.0
    }
}

/// `mm = acc(M, M)`, `mmp = acc(M, M')`, `mpm = acc(M', M)`,
/// `mpmp = acc(M', M')`, where the first argument is the semantics the LM
/// was trained on and the second the one the probe is calibrated and
/// measured on. The last two need an LM trained on `M'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyQuadruple {
    pub mm: Estimate,
    pub mmp: Estimate,
    pub mpm: Option<Estimate>,
    pub mpmp: Option<Estimate>,
}

impl AccuracyQuadruple {
    pub fn point(mm: f64, mmp: f64, mpm: f64, mpmp: f64) -> Self {
        Self {
            mm: Estimate::exact(mm),
            mmp: Estimate::exact(mmp),
            mpm: Some(Estimate::exact(mpm)),
            mpmp: Some(Estimate::exact(mpmp)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InequalityVerdict {
    Holds,
    /// The point estimate violates the inequality but the interval of the
    /// difference reaches zero.
    HoldsWithinNoise,
    Violated,
    /// No LM was trained on `M'`; the inequality is taken on the symmetry
    /// of the construction.
    AssumedBySymmetry,
}

impl InequalityVerdict {
    pub fn is_violated(self) -> bool {
        self == InequalityVerdict::Violated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineCheck {
    /// `mpmp ≥ mm`, when measured.
    pub eq1: Option<bool>,
    /// `mmp ≥ mpm`, when measured.
    pub eq2: Option<bool>,
    pub eq1_verdict: InequalityVerdict,
    pub eq2_verdict: InequalityVerdict,
}

fn inequality_verdict(larger: &Estimate, smaller: &Estimate) -> InequalityVerdict {
    let diff = larger.value - smaller.value;
    if diff >= 0.0 {
        return InequalityVerdict::Holds;
    }
    let se = (larger.std_error().powi(2) + smaller.std_error().powi(2)).sqrt();
    if diff + Z95 * se >= 0.0 {
        InequalityVerdict::HoldsWithinNoise
    } else {
        InequalityVerdict::Violated
    }
}

/// Whether `M'` is a valid baseline for `M`: `mpmp ≥ mm` (`eq1`) and
/// `mmp ≥ mpm` (`eq2`).
pub fn check_valid_baseline(q: &AccuracyQuadruple) -> BaselineCheck {
    match (q.mpm, q.mpmp) {
        (Some(mpm), Some(mpmp)) => BaselineCheck {
            eq1: Some(mpmp.value >= q.mm.value),
            eq2: Some(q.mmp.value >= mpm.value),
            eq1_verdict: inequality_verdict(&mpmp, &q.mm),
            eq2_verdict: inequality_verdict(&q.mmp, &mpm),
        },
        _ => BaselineCheck {
            eq1: None,
            eq2: None,
            eq1_verdict: InequalityVerdict::AssumedBySymmetry,
            eq2_verdict: InequalityVerdict::AssumedBySymmetry,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediationVerdict {
    PositiveMediation,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediationReport {
    pub quadruple: AccuracyQuadruple,
    pub check: BaselineCheck,
    /// `mm − mmp`, the mediated measurement.
    pub lower_bound: Estimate,
    /// `mm − mpm`.
    pub nie_m_mp: Option<f64>,
    /// `mpmp − mmp`.
    pub nie_mp_m: Option<f64>,
    pub verdict: MediationVerdict,
}

impl MediationReport {
    /// `lower_bound ≤ nie_m_mp ≤ nie_mp_m`, when all terms are known.
    pub fn chain_holds(&self) -> Option<bool> {
        Some(nie_chain_holds(
            self.lower_bound.value,
            self.nie_m_mp?,
            self.nie_mp_m?,
        ))
    }
}

/// The ordering `lower ≤ nie_m_mp ≤ nie_mp_m` with `1e-12` slack.
pub fn nie_chain_holds(lower: f64, nie_m_mp: f64, nie_mp_m: f64) -> bool {
    lower <= nie_m_mp + 1e-12 && nie_m_mp <= nie_mp_m + 1e-12
}

/// Bounds and verdict for one quadruple. `lower_bound` is the mediated
/// measurement with its interval. When it is `None`, the interval is
/// formed from the two accuracies as if they were independent.
pub fn nie_bounds(q: &AccuracyQuadruple, lower_bound: Option<Estimate>) -> MediationReport {
    let lower_bound = lower_bound.unwrap_or_else(|| {
        let value = q.mm.value - q.mmp.value;
        let se = (q.mm.std_error().powi(2) + q.mmp.std_error().powi(2)).sqrt();
        Estimate {
            value,
            ci_lo: value - Z95 * se,
            ci_hi: value + Z95 * se,
            n: q.mm.n.min(q.mmp.n),
        }
    });
    let check = check_valid_baseline(q);
    let baseline_ok = !check.eq1_verdict.is_violated() && !check.eq2_verdict.is_violated();
    let verdict = if lower_bound.value > 0.0 && lower_bound.ci_lo > 0.0 && baseline_ok {
        MediationVerdict::PositiveMediation
    } else {
        MediationVerdict::Inconclusive
    };
    MediationReport {
        quadruple: *q,
        check,
        lower_bound,
        nie_m_mp: q.mpm.map(|mpm| q.mm.value - mpm.value),
        nie_mp_m: q.mpmp.map(|mpmp| mpmp.value - q.mmp.value),
        verdict,
    }
}
