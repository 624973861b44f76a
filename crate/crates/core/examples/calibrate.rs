//! λ calibration sweep for the desk pipeline.
//!
//! `cargo run --release -p doge-core --example calibrate -- lambdas=0,0.05,0.1 kd.sample_temp=1`

use std::time::Instant;

use doge_core::lab::{lambda_sweep, LabConfig, Prepared};

fn main() -> doge_core::Result<()> {
    let mut cfg = LabConfig::default();
    let mut lambdas = vec![0.0, 0.05, 0.1];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        if k == "lambdas" {
            lambdas = v.split(',').map(|x| x.trim().parse().expect("lambda")).collect();
        } else {
            cfg.set(k, v)?;
        }
    }
    let t0 = Instant::now();
    let prepared = Prepared::build(&cfg)?;
    let eval = prepared.eval_set(&cfg);
    let vocab = &prepared.corpus.vocab;
    let tacc = doge_core::distill::evaluate_accuracy(&prepared.teacher, vocab, &eval)?.accuracy;
    let paccs: Vec<f64> = prepared
        .proxies
        .iter()
        .map(|p| doge_core::distill::evaluate_accuracy(p, vocab, &eval).map(|r| r.accuracy))
        .collect::<Result<_, _>>()?;
    println!("prepared in {:.1}s teacher {tacc:.4} proxies {paccs:?}", t0.elapsed().as_secs_f64());
    for row in lambda_sweep(&cfg, &prepared, &lambdas)? {
        match (&row.diverged, &row.report) {
            (Some(d), _) => println!("lambda {} diverged: {d}", row.lambda),
            (None, Some(r)) => println!(
                "lambda {} teacher {:.4} -> {:.4} ({:+.4}) student {:.4} -> {:.4} ({:+.4}) per-seed {:?} {:?} t={:.0}s",
                row.lambda,
                r.teacher_sft_acc,
                r.teacher_defensive_acc,
                r.teacher_delta,
                r.student_from_sft_acc,
                r.student_from_defensive_acc,
                r.student_delta,
                r.per_seed_student_from_sft,
                r.per_seed_student_from_defensive,
                t0.elapsed().as_secs_f64()
            ),
            _ => unreachable!(),
        }
    }
    Ok(())
}
