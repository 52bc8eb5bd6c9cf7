use asag_core::corpus::{normalize_score, RawScore, ScoreScale};
use asag_core::eval::{self, PairedScores};
use asag_core::llm::parse_grade_response;
use proptest::prelude::*;

fn score() -> impl Strategy<Value = f64> {
    0.0..=100.0f64
}

fn pairs(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((score(), score()), 2..max)
}

proptest! {
    #[test]
    fn rmse_zero_iff_identical(p in pairs(60)) {
        let same = PairedScores::new(p.iter().map(|&(x, _)| (x, x)).collect()).unwrap();
        prop_assert_eq!(eval::rmse(&same).unwrap(), 0.0);
        let differs = p.iter().any(|(a, b)| a != b);
        let r = eval::rmse(&PairedScores::new(p).unwrap()).unwrap();
        prop_assert_eq!(r > 0.0, differs);
    }

    #[test]
    fn rmse_bounded_by_max_error(p in pairs(60)) {
        let s = PairedScores::new(p).unwrap();
        let q = eval::abs_error_stats(&s).unwrap();
        let r = eval::rmse(&s).unwrap();
        prop_assert!(r <= q.max + 1e-12);
        prop_assert!(r + 1e-12 >= eval::abs_error_stats(&s).unwrap().min);
    }

    #[test]
    fn pearson_invariant_under_positive_affine_maps(p in pairs(60), scale in 0.05..1.0f64, room in 0.0..=1.0f64) {
        let s = PairedScores::new(p.clone()).unwrap();
        let Ok(r) = eval::pearson_r(&s) else { return Ok(()) };
        prop_assert!((-1.0..=1.0).contains(&r));
        let shift = room * 100.0 * (1.0 - scale);
        let mapped = PairedScores::new(p.iter().map(|&(x, y)| ((x * scale + shift).min(100.0), y)).collect()).unwrap();
        prop_assert!((eval::pearson_r(&mapped).unwrap() - r).abs() < 1e-9);
        let flipped = PairedScores::new(p.iter().map(|&(x, y)| (100.0 - x, y)).collect()).unwrap();
        prop_assert!((eval::pearson_r(&flipped).unwrap() + r).abs() < 1e-9);
    }

    #[test]
    fn pearson_symmetric(p in pairs(60)) {
        let s = PairedScores::new(p.clone()).unwrap();
        let t = PairedScores::new(p.iter().map(|&(x, y)| (y, x)).collect()).unwrap();
        match (eval::pearson_r(&s), eval::pearson_r(&t)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn quartiles_ordered_and_permutation_invariant(mut v in prop::collection::vec(0.0..100.0f64, 1..80)) {
        let q = eval::quartiles(&v).unwrap();
        prop_assert!(q.min <= q.q1 && q.q1 <= q.median && q.median <= q.q3 && q.q3 <= q.max);
        v.reverse();
        prop_assert_eq!(eval::quartiles(&v).unwrap(), q);
    }

    #[test]
    fn welch_antisymmetric(a in prop::collection::vec(score(), 2..50), b in prop::collection::vec(score(), 2..50)) {
        let (Ok(ab), Ok(ba)) = (eval::welch_t_test(&a, &b), eval::welch_t_test(&b, &a)) else { return Ok(()) };
        prop_assert!((ab.t + ba.t).abs() < 1e-12);
        prop_assert!((ab.degrees_of_freedom - ba.degrees_of_freedom).abs() < 1e-9);
        prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-12);
        prop_assert!(ab.p_two_sided > 0.0 && ab.p_two_sided <= 1.0);
    }

    #[test]
    fn welch_shift_invariant(a in prop::collection::vec(score(), 2..40), b in prop::collection::vec(score(), 2..40), c in -50.0..50.0f64) {
        let Ok(base) = eval::welch_t_test(&a, &b) else { return Ok(()) };
        let sa: Vec<f64> = a.iter().map(|x| x + c).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + c).collect();
        let shifted = eval::welch_t_test(&sa, &sb).unwrap();
        prop_assert!((base.t - shifted.t).abs() < 1e-6);
    }

    #[test]
    fn grade_round_trip(g in 0u8..=100, fb in "[a-zA-Z ,.!?']{0,80}", wrap in 0usize..4) {
        let body = serde_json::json!({"grade": g, "feedback": fb}).to_string();
        let raw = match wrap {
            0 => body,
            1 => format!("```json\n{body}\n```"),
            2 => format!("Result:\n{body}\nDone."),
            _ => format!("  {body}  "),
        };
        let parsed = parse_grade_response(&raw).unwrap();
        prop_assert_eq!(parsed.grade, g);
        prop_assert_eq!(parsed.feedback, fb);
    }

    #[test]
    fn grades_outside_range_rejected(g in prop_oneof![101i64..100_000, -100_000i64..0]) {
        let raw = format!(r#"{{"grade": {g}, "feedback": "x"}}"#);
        prop_assert!(parse_grade_response(&raw).is_err());
    }

    #[test]
    fn normalization_monotone_and_bounded(min in -1e3..1e3f64, width in 1e-2..1e4f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let scale = ScoreScale::numeric(min, min + width);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n = |t: f64| normalize_score(&RawScore::Number(min + t * width), &scale).unwrap();
        let (x, y) = (n(lo), n(hi));
        prop_assert!((0.0..=100.0).contains(&x) && (0.0..=100.0).contains(&y));
        prop_assert!(x <= y);
    }

    #[test]
    fn normalization_rejects_out_of_scale(min in -1e3..1e3f64, width in 1e-2..1e4f64, over in 1e-3..1e3f64) {
        let scale = ScoreScale::numeric(min, min + width);
        prop_assert!(normalize_score(&RawScore::Number(min + width + over), &scale).is_err());
        prop_assert!(normalize_score(&RawScore::Number(min - over), &scale).is_err());
    }
}
