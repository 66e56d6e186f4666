//! Consensus glycemic outcomes and insulin partition for simulation traces,
//! plus cohort aggregation.

use thiserror::Error;

use crate::mpc::{DoseKind, DosingRecord};
use crate::scenario::{SimulationTrace, CONTROL_STEP_MIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace has no samples")]
    Empty,
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RangeStats {
    pub tir: f64,
    pub titr: f64,
    pub tar: f64,
    pub tar_gt250: f64,
    pub tbr: f64,
    pub tbr_lt54: f64,
}

fn pct(bg: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    100.0 * bg.iter().filter(|g| pred(**g)).count() as f64 / bg.len() as f64
}

/// Percent of samples per glucose band (70 and 180 count as in range).
pub fn ranges(bg: &[f64]) -> Result<RangeStats, MetricsError> {
    if bg.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(RangeStats {
        tir: pct(bg, |g| (70.0..=180.0).contains(&g)),
        titr: pct(bg, |g| (70.0..=140.0).contains(&g)),
        tar: pct(bg, |g| g > 180.0),
        tar_gt250: pct(bg, |g| g > 250.0),
        tbr: pct(bg, |g| g < 70.0),
        tbr_lt54: pct(bg, |g| g < 54.0),
    })
}

/// Symmetrized BG scale; zero near 112.5 mg/dL.
pub fn risk_transform(bg: f64) -> f64 {
    1.509 * (bg.ln().powf(1.084) - 5.381)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Variability {
    pub mean: f64,
    pub sd: f64,
    /// %.
    pub cv: f64,
    pub hbgi: f64,
    pub lbgi: f64,
}

/// CV (sample SD) and the low/high BG indices, each averaged over all
/// samples.
pub fn variability_and_risk(bg: &[f64]) -> Result<Variability, MetricsError> {
    if bg.len() < 2 {
        return Err(MetricsError::TooShort(bg.len()));
    }
    let n = bg.len() as f64;
    let mean = bg.iter().sum::<f64>() / n;
    let sd = (bg.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (mut lo, mut hi) = (0.0, 0.0);
    for &g in bg {
        let f = risk_transform(g);
        let r = 10.0 * f * f;
        if f < 0.0 {
            lo += r;
        } else if f > 0.0 {
            hi += r;
        }
    }
    Ok(Variability {
        mean,
        sd,
        cv: 100.0 * sd / mean,
        hbgi: hi / n,
        lbgi: lo / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventCounts {
    pub hypo: usize,
    pub hyper: usize,
}

/// Episodes beyond `outside` lasting `dwell` minutes; a new episode needs
/// `dwell` minutes back in range first.
fn count_episodes(bg: &[f64], dt: f64, dwell: f64, outside: impl Fn(f64) -> bool) -> usize {
    let need = (dwell / dt).ceil().max(1.0) as usize;
    let mut count = 0;
    let mut in_event = false;
    let mut run_out = 0;
    let mut run_in = 0;
    for &g in bg {
        if outside(g) {
            run_out += 1;
            run_in = 0;
            if !in_event && run_out >= need {
                in_event = true;
                count += 1;
            }
        } else {
            run_in += 1;
            run_out = 0;
            if in_event && run_in >= need {
                in_event = false;
            }
        }
    }
    count
}

pub fn events(bg: &[f64], dt: f64) -> EventCounts {
    EventCounts {
        hypo: count_episodes(bg, dt, 15.0, |g| g < 70.0),
        hyper: count_episodes(bg, dt, 15.0, |g| g > 180.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InsulinPartition {
    /// U/day.
    pub tdi: f64,
    pub tdi_per_kg: f64,
    pub basal_pct: f64,
    pub bolus_pct: f64,
    pub prandial_pct: f64,
    pub correction_pct: f64,
}

/// Delivered insulin per day split by kind. Percentages are zero when no
/// insulin was delivered.
pub fn insulin_partition(dosing: &[DosingRecord], days: f64, bw: f64) -> InsulinPartition {
    let (mut basal, mut prandial, mut correction) = (0.0, 0.0, 0.0);
    for d in dosing {
        match d.kind {
            DoseKind::BasalStep => basal += d.amount,
            DoseKind::PrandialBolus => prandial += d.amount,
            DoseKind::CorrectionBolus => correction += d.amount,
        }
    }
    let total = basal + prandial + correction;
    let tdi = if days > 0.0 { total / days } else { 0.0 };
    let share = |x: f64| if total > 0.0 { 100.0 * x / total } else { 0.0 };
    let bolus = prandial + correction;
    InsulinPartition {
        tdi,
        tdi_per_kg: if bw > 0.0 { tdi / bw } else { 0.0 },
        basal_pct: if total > 0.0 { 100.0 - share(bolus) } else { 0.0 },
        bolus_pct: share(bolus),
        prandial_pct: if bolus > 0.0 { share(bolus) - share(correction) } else { 0.0 },
        correction_pct: share(correction),
    }
}

/// Which glucose signal the report counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BgSource {
    #[default]
    Plant,
    Cgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GlycemicReport {
    pub ranges: RangeStats,
    pub variability: Variability,
    pub events: EventCounts,
    pub hypo_per_day: f64,
    pub hyper_per_day: f64,
    pub partition: InsulinPartition,
    pub days: f64,
    pub rescues: usize,
}

impl GlycemicReport {
    /// Closure identities; returns the first that fails.
    pub fn check_closure(&self, tol: f64) -> Result<(), String> {
        let r = &self.ranges;
        let p = &self.partition;
        let checks = [
            ("tir+tar+tbr=100", (r.tir + r.tar + r.tbr - 100.0).abs() <= tol),
            ("titr<=tir", r.titr <= r.tir + tol),
            ("tbr_lt54<=tbr", r.tbr_lt54 <= r.tbr + tol),
            ("tar_gt250<=tar", r.tar_gt250 <= r.tar + tol),
            (
                "basal+bolus=100",
                p.tdi == 0.0 || (p.basal_pct + p.bolus_pct - 100.0).abs() <= tol,
            ),
            (
                "correction+prandial=bolus",
                (p.correction_pct + p.prandial_pct - p.bolus_pct).abs() <= tol,
            ),
        ];
        match checks.iter().find(|c| !c.1) {
            Some((name, _)) => Err(format!("closure violated: {name}")),
            None => Ok(()),
        }
    }
}

pub fn report_from_series(
    bg: &[f64],
    dt: f64,
    dosing: &[DosingRecord],
    bw: f64,
) -> Result<GlycemicReport, MetricsError> {
    let ranges = ranges(bg)?;
    let variability = variability_and_risk(bg)?;
    let ev = events(bg, dt);
    let days = bg.len() as f64 * dt / 1440.0;
    Ok(GlycemicReport {
        ranges,
        variability,
        events: ev,
        hypo_per_day: ev.hypo as f64 / days,
        hyper_per_day: ev.hyper as f64 / days,
        partition: insulin_partition(dosing, days, bw),
        days,
        rescues: 0,
    })
}

pub fn report(trace: &SimulationTrace, source: BgSource) -> Result<GlycemicReport, MetricsError> {
    let bg: Vec<f64> = trace
        .rows
        .iter()
        .map(|r| match source {
            BgSource::Plant => r.plant_bg,
            BgSource::Cgm => r.cgm,
        })
        .collect();
    let mut rep = report_from_series(&bg, CONTROL_STEP_MIN, &trace.dosing, trace.body_weight)?;
    rep.rescues = trace.rescues.len();
    Ok(rep)
}

/// Median, quartiles (linear interpolation), mean and sample SD.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
            mean,
            sd,
        }
    }

    /// `median [q1 q3], mean (sd)` with one decimal.
    pub fn format(&self) -> String {
        format!(
            "{:.1} [{:.1} {:.1}], {:.1} ({:.1})",
            self.median, self.q1, self.q3, self.mean, self.sd
        )
    }
}

/// Shares of subjects meeting the consensus targets, %.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CohortFlags {
    pub tir_gt70: f64,
    pub tbr_lt4: f64,
    pub tar_lt25: f64,
    pub tar250_lt5: f64,
}

pub fn cohort_flags(reports: &[GlycemicReport]) -> CohortFlags {
    if reports.is_empty() {
        return CohortFlags::default();
    }
    let share = |f: &dyn Fn(&GlycemicReport) -> bool| {
        100.0 * reports.iter().filter(|r| f(r)).count() as f64 / reports.len() as f64
    };
    CohortFlags {
        tir_gt70: share(&|r| r.ranges.tir > 70.0),
        tbr_lt4: share(&|r| r.ranges.tbr < 4.0),
        tar_lt25: share(&|r| r.ranges.tar < 25.0),
        tar250_lt5: share(&|r| r.ranges.tar_gt250 < 5.0),
    }
}

/// Named per-report metric columns in output order.
pub const METRIC_NAMES: [&str; 22] = [
    "tir",
    "titr",
    "tar",
    "tar_gt250",
    "tbr",
    "tbr_lt54",
    "mean_bg",
    "cv",
    "hbgi",
    "lbgi",
    "hypo_events",
    "hyper_events",
    "hypo_per_day",
    "hyper_per_day",
    "tdi",
    "tdi_per_kg",
    "basal_pct",
    "bolus_pct",
    "prandial_pct",
    "correction_pct",
    "rescues",
    "days",
];

impl GlycemicReport {
    pub fn values(&self) -> [f64; 22] {
        let r = &self.ranges;
        let v = &self.variability;
        let p = &self.partition;
        [
            r.tir,
            r.titr,
            r.tar,
            r.tar_gt250,
            r.tbr,
            r.tbr_lt54,
            v.mean,
            v.cv,
            v.hbgi,
            v.lbgi,
            self.events.hypo as f64,
            self.events.hyper as f64,
            self.hypo_per_day,
            self.hyper_per_day,
            p.tdi,
            p.tdi_per_kg,
            p.basal_pct,
            p.bolus_pct,
            p.prandial_pct,
            p.correction_pct,
            self.rescues as f64,
            self.days,
        ]
    }
}

/// Per-metric cohort summaries, in `METRIC_NAMES` order.
pub fn aggregate(reports: &[GlycemicReport]) -> Vec<(&'static str, Summary)> {
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let col: Vec<f64> = reports.iter().map(|r| r.values()[i]).collect();
            (*name, Summary::of(&col))
        })
        .collect()
}
