use prnuda::gradcheck::{format_report, run_gradcheck, run_gradcheck_with, Corrupt, TERMS};

#[test]
fn all_terms_match_finite_differences() {
    for seed in [0, 1] {
        let rows = run_gradcheck(seed).unwrap();
        println!("{}", format_report(&rows));
        assert_eq!(rows.len(), 7);
        for (r, name) in rows.iter().zip(TERMS) {
            assert_eq!(r.term, name);
            assert!(r.probes >= 24);
            assert!(r.passed, "{} rel err {:.3e}", r.term, r.max_rel_err);
        }
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    for i in 0..TERMS.len() {
        let rows = run_gradcheck_with(3, Corrupt::Term(i)).unwrap();
        for (j, r) in rows.iter().enumerate() {
            assert_eq!(r.passed, i != j, "term {} with corruption of {}", r.term, TERMS[i]);
        }
    }
}
