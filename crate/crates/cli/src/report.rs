//! Human-readable summaries of gap and bound reports.

use std::fmt::Write as _;

use doge_core::distill::DefenseGapReport;
use doge_core::theory::{BoundKind, BoundReport};

/// The inequality each bound kind asserts.
pub fn inequality(kind: BoundKind) -> &'static str {
    match kind {
        BoundKind::GradientDiscrepancy => "‖g(r) − g(s)‖ ≤ G·√(2·E_t KL(r_t‖s_t))",
        BoundKind::Pinsker => "TV(r_t, s_t) ≤ √(KL(r_t‖s_t)/2)",
        BoundKind::Jensen => "E_t √KL_t ≤ √(E_t KL_t)",
        BoundKind::OneStepDescent => "L(θ⁺; q) ≤ L(θ; q) − η⟨g(q), g(p)⟩ + (L/2)·η²‖g(p)‖²",
        BoundKind::MasterBound => {
            "L(θ⁺; q) − L(θ; q) ≤ −η‖g(q)‖² + η‖g(q)‖·G·√(2D̄) + (L/2)·η²‖g(p)‖²"
        }
        BoundKind::ThresholdConsistency => "√D̄ ≥ threshold ⇒ master bound ≥ 0",
        BoundKind::DivergenceRange => "0 ≤ KL(p‖Smooth(q)) ≤ (1 − ε)·log(1 + V(1 − ε)/ε)",
    }
}

/// Bound verdicts, one line per checked inequality; violated inequalities
/// are flagged by name.
pub fn render_bounds(bounds: &BoundReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "bound checks: {} trials, {} violations (G_hat {:.4e}, L_hat {:.4e})",
        bounds.trials, bounds.violations, bounds.g_hat, bounds.l_hat
    );
    for (kind, t) in bounds.summary() {
        let slack = t.min_slack.map_or("n/a".into(), |m| format!("{m:.3e}"));
        if t.violations > 0 {
            let _ = writeln!(
                s,
                "  VIOLATED {}: {} of {} trials break {} (min slack {slack})",
                kind.label(),
                t.violations,
                t.trials,
                inequality(kind)
            );
        } else {
            let _ = writeln!(s, "  ok {}: {} trials, min slack {slack}", kind.label(), t.trials);
        }
    }
    s
}

pub fn render_gap(gap: &DefenseGapReport) -> String {
    let mut s = String::new();
    let lambda = gap.lambda.map_or("unknown".into(), |l| l.to_string());
    let _ = writeln!(
        s,
        "defense gap at lambda = {lambda} over seeds {:?} on {} eval instances",
        gap.seeds, gap.n_eval
    );
    let verdict = if gap.teacher_preserved() {
        format!("preserved (tolerance {})", gap.teacher_tolerance)
    } else {
        format!("NOT preserved (tolerance {})", gap.teacher_tolerance)
    };
    let _ = writeln!(
        s,
        "teacher: sft {:.4} -> defensive {:.4} (delta {:+.4}), {verdict}",
        gap.teacher_sft_acc, gap.teacher_defensive_acc, gap.teacher_delta
    );
    let effect = if gap.student_delta >= 0.0 {
        "no defense effect".to_string()
    } else {
        format!("student degraded by {:.4}", -gap.student_delta)
    };
    let _ = writeln!(
        s,
        "student: from sft {:.4} -> from defensive {:.4} (delta {:+.4}), {effect}",
        gap.student_from_sft_acc, gap.student_from_defensive_acc, gap.student_delta
    );
    s
}

pub fn emit_report(gap: &DefenseGapReport, bounds: &BoundReport) -> String {
    render_gap(gap) + &render_bounds(bounds)
}
