use std::time::Instant;

use hierfuse::gradsuite::{random_cases, run_suite, Precision};

#[test]
fn cases_cover_the_configuration_axes() {
    let cases = random_cases(12, 7);
    assert_eq!(cases.len(), 12);
    let taps: std::collections::BTreeSet<usize> = cases.iter().map(|c| c.tap_blocks.len()).collect();
    let heads: std::collections::BTreeSet<usize> = cases.iter().map(|c| c.fusion.heads).collect();
    assert!(taps.len() >= 2 && heads.len() >= 2);
    assert!(cases[0].fusion.t2v && cases[0].fusion.self_attn && cases[0].fusion.v2t);
}

#[test]
fn suite_passes_in_both_precisions() {
    for precision in [Precision::F64, Precision::F32] {
        let start = Instant::now();
        let report = run_suite(precision, 12, 7).unwrap();
        for c in &report.cases {
            println!(
                "{precision} {}: max rel {:.3e} over {} entries (worst {:?}: {:.6e} vs {:.6e})",
                c.label, c.max_rel_error, c.entries, c.worst_param, c.worst_analytic, c.worst_numeric
            );
        }
        println!("{precision}: {:.1}s", start.elapsed().as_secs_f64());
        assert!(report.passed(), "{precision} max rel error {:.3e}", report.max_rel_error);
    }
}
