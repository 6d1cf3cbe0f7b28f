use psgalign_web::{ecg_view, parse_subjects, rotary_view, weights_view};

const ROWS: &str = "50,F,A,n1\n70,F,A,n1\n30,M,B,n2\n,U,,n3\n";

#[test]
fn weight_rows_are_distributions_and_pseudo_flags_follow_nights() {
    let v = weights_view(ROWS, 0.1, 0.2, 1.0, 3).unwrap();
    for row in &v.omega {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(v.pseudo[0][1] && v.pseudo[1][0]);
    assert!(!v.pseudo[0][0] && !v.pseudo[2][3]);
    assert!(v.infonce.is_finite() && v.dash.is_finite());
    assert_eq!(v.ln_b, 4f64.ln());
}

#[test]
fn margin_lowers_the_loss_when_a_pseudo_negative_exists() {
    let a = weights_view(ROWS, 0.0, 0.2, 1.0, 3).unwrap();
    let b = weights_view(ROWS, 0.1, 0.2, 1.0, 3).unwrap();
    assert!(b.dash < a.dash);
    assert_eq!(a.infonce, b.infonce);
}

#[test]
fn malformed_rows_are_rejected() {
    assert!(parse_subjects("50,F,A").is_err());
    assert!(parse_subjects("old,F,A,n1").is_err());
    assert!(weights_view("50,F,A,n1", 0.1, 0.2, 1.0, 0).is_err());
    assert!(weights_view(ROWS, -1.0, 0.2, 1.0, 0).is_err());
}

#[test]
fn rotary_scores_are_constant_along_diagonals() {
    let v = rotary_view(12, 8, 5).unwrap();
    assert!(v.max_diagonal_spread < 1e-9, "{}", v.max_diagonal_spread);
    assert!(rotary_view(4, 3, 0).is_err());
}

#[test]
fn steady_rhythm_gives_its_interval() {
    let v = ecg_view(60.0, 0.0, 0.01, 60.0, 1).unwrap();
    assert!((v.mean_ibi - 1.0).abs() < 0.005, "{}", v.mean_ibi);
    assert!((v.peaks.len() as i64 - 60).abs() <= 1);
    assert_eq!(v.ibi.len(), 240);
    assert!(ecg_view(10.0, 0.0, 0.0, 60.0, 1).is_err());
}
