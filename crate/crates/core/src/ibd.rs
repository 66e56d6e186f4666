//! Insulin bolus delivery: trend-aware prandial boluses and gated automatic
//! correction boluses.

use crate::mpc::TherapyProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrowCategory {
    DoubleUp,
    SingleUp,
    DiagonalUp,
    Flat,
    DiagonalDown,
    SingleDown,
    DoubleDown,
}

impl ArrowCategory {
    pub const ALL: [ArrowCategory; 7] = [
        ArrowCategory::DoubleUp,
        ArrowCategory::SingleUp,
        ArrowCategory::DiagonalUp,
        ArrowCategory::Flat,
        ArrowCategory::DiagonalDown,
        ArrowCategory::SingleDown,
        ArrowCategory::DoubleDown,
    ];

    /// +1 for rising arrows, -1 for falling, 0 for flat.
    pub fn direction(&self) -> f64 {
        use ArrowCategory::*;
        match self {
            DoubleUp | SingleUp | DiagonalUp => 1.0,
            Flat => 0.0,
            DiagonalDown | SingleDown | DoubleDown => -1.0,
        }
    }

    /// 3 = double, 2 = single, 1 = diagonal, 0 = flat.
    pub fn magnitude(&self) -> u8 {
        use ArrowCategory::*;
        match self {
            DoubleUp | DoubleDown => 3,
            SingleUp | SingleDown => 2,
            DiagonalUp | DiagonalDown => 1,
            Flat => 0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        use ArrowCategory::*;
        match self {
            DoubleUp => "double-up",
            SingleUp => "single-up",
            DiagonalUp => "diagonal-up",
            Flat => "flat",
            DiagonalDown => "diagonal-down",
            SingleDown => "single-down",
            DoubleDown => "double-down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendArrow {
    pub category: ArrowCategory,
    /// mg/dL/min.
    pub roc: f64,
}

impl TrendArrow {
    pub fn from_roc(roc: f64) -> Self {
        use ArrowCategory::*;
        let a = roc.abs();
        let up = roc > 0.0;
        let category = if a >= 3.0 {
            if up { DoubleUp } else { DoubleDown }
        } else if a >= 2.0 {
            if up { SingleUp } else { SingleDown }
        } else if a >= 1.0 {
            if up { DiagonalUp } else { DiagonalDown }
        } else {
            Flat
        };
        Self { category, roc }
    }
}

const ADJUSTED_GLUCOSE_RANGE: (f64, f64) = (40.0, 600.0);

/// Trend-adjusted glucose, clamped to [40, 600] mg/dL.
pub fn adjusted_glucose(g_cur: f64, arrow: &TrendArrow) -> f64 {
    let shift = match arrow.category.magnitude() {
        3 => 100.0,
        2 => 75.0,
        1 => 50.0,
        _ => 0.0,
    };
    (g_cur + arrow.category.direction() * shift)
        .clamp(ADJUSTED_GLUCOSE_RANGE.0, ADJUSTED_GLUCOSE_RANGE.1)
}

/// CF band index: 0 = CF < 25, 1 = [25, 50), 2 = [50, 75), 3 = CF >= 75.
pub fn cf_band(cf: f64) -> usize {
    if cf < 25.0 {
        0
    } else if cf < 50.0 {
        1
    } else if cf < 75.0 {
        2
    } else {
        3
    }
}

/// Unsigned bolus adjustment (U) by arrow magnitude (double, single,
/// diagonal) and CF band.
const ROC_CF_TABLE: [[f64; 4]; 3] = [
    [4.5, 3.0, 1.5, 1.0],
    [3.0, 2.0, 1.0, 0.5],
    [1.5, 1.0, 0.5, 0.25],
];

/// Signed trend/CF bolus adjustment, U.
pub fn roc_cf_adjustment(arrow: &TrendArrow, cf: f64) -> f64 {
    let row = match arrow.category.magnitude() {
        3 => 0,
        2 => 1,
        1 => 2,
        _ => return 0.0,
    };
    arrow.category.direction() * ROC_CF_TABLE[row][cf_band(cf)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BolusRequest {
    pub t: f64,
    /// Announced carbohydrate, g.
    pub cho: f64,
    pub g_cur: f64,
    pub arrow: TrendArrow,
    pub g_tar: f64,
    pub profile: TherapyProfile,
    pub iob: f64,
}

/// Bolus with the terms that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BolusBreakdown {
    pub carb_term: f64,
    pub trend_term: f64,
    pub glucose_term: f64,
    pub iob: f64,
    pub g_adj: f64,
    /// Gain (1 for prandial).
    pub alpha: f64,
    /// Formula value before flooring.
    pub raw: f64,
    /// Delivered amount, U.
    pub amount: f64,
}

pub fn prandial_bolus(req: &BolusRequest) -> BolusBreakdown {
    let g_adj = adjusted_glucose(req.g_cur, &req.arrow);
    let carb_term = req.cho / req.profile.cr;
    let trend_term = roc_cf_adjustment(&req.arrow, req.profile.cf);
    let glucose_term = (g_adj - req.g_tar) / req.profile.cf;
    let raw = carb_term + trend_term + glucose_term - req.iob;
    BolusBreakdown {
        carb_term,
        trend_term,
        glucose_term,
        iob: req.iob,
        g_adj,
        alpha: 1.0,
        raw,
        amount: raw.max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionGate {
    /// mg/dL.
    pub bg_threshold: f64,
    /// min.
    pub min_since_meal: f64,
    /// min.
    pub min_since_correction: f64,
    pub alpha_double_up: f64,
    pub alpha_single_up: f64,
    pub alpha_diagonal_up: f64,
    pub alpha_other: f64,
    /// Glucose target, mg/dL.
    pub g_tar: f64,
}

impl Default for CorrectionGate {
    fn default() -> Self {
        Self {
            bg_threshold: 180.0,
            min_since_meal: 180.0,
            min_since_correction: 30.0,
            alpha_double_up: 1.5,
            alpha_single_up: 1.4,
            alpha_diagonal_up: 1.3,
            alpha_other: 1.0,
            g_tar: 120.0,
        }
    }
}

impl CorrectionGate {
    pub fn alpha(&self, arrow: ArrowCategory) -> f64 {
        match arrow {
            ArrowCategory::DoubleUp => self.alpha_double_up,
            ArrowCategory::SingleUp => self.alpha_single_up,
            ArrowCategory::DiagonalUp => self.alpha_diagonal_up,
            _ => self.alpha_other,
        }
    }
}

/// Per-subject timestamps consulted by the correction gate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateState {
    pub last_meal_announcement: Option<f64>,
    pub last_correction: Option<f64>,
}

impl GateState {
    pub fn open(&self, t: f64, g_cur: f64, gate: &CorrectionGate) -> bool {
        g_cur > gate.bg_threshold
            && self
                .last_meal_announcement
                .is_none_or(|m| t - m >= gate.min_since_meal)
            && self
                .last_correction
                .is_none_or(|c| t - c >= gate.min_since_correction)
    }
}

/// Correction bolus if the gate is open. Returns `None` when gated; a
/// zero-amount breakdown when the formula is non-positive (gate timestamp
/// untouched in that case).
pub fn correction_bolus(
    t: f64,
    g_cur: f64,
    arrow: &TrendArrow,
    profile: &TherapyProfile,
    iob: f64,
    gate: &CorrectionGate,
    state: &mut GateState,
) -> Option<BolusBreakdown> {
    if !state.open(t, g_cur, gate) {
        return None;
    }
    let g_adj = adjusted_glucose(g_cur, arrow);
    let alpha = gate.alpha(arrow.category);
    let glucose_term = (g_adj - gate.g_tar) / profile.cf;
    let raw = alpha * (glucose_term - iob);
    let amount = raw.max(0.0);
    if amount > 0.0 {
        state.last_correction = Some(t);
    }
    Some(BolusBreakdown {
        carb_term: 0.0,
        trend_term: 0.0,
        glucose_term,
        iob,
        g_adj,
        alpha,
        raw,
        amount,
    })
}
