use ugsep_demo::{attention_view, mask_view, reuse_curve};

#[test]
fn mask_zeros_sit_in_u_rows_over_g_columns() {
    let v = mask_view(4, 4, 4, 4, 16).unwrap();
    assert_eq!((v.heads, v.cols, v.head_dim, v.boundary), (8, 16, 2, 8));
    assert_eq!(v.zeros, 4 * 8);
    for (i, row) in v.rows.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            assert_eq!(b == 0, i < 4 && j >= 8);
        }
    }
    assert!(mask_view(4, 4, 4, 4, 12).is_err());
}

#[test]
fn reuse_curve_is_monotone_and_hits_half_ffn_at_balance() {
    let pts = reuse_curve(8, 32, 64, 2, 4, 64).unwrap();
    assert_eq!(pts.len(), 8);
    assert_eq!(pts[0].c_u, 0);
    assert_eq!(pts[0].reusable_ffn_fraction, 0.0);
    assert_eq!(pts[4].reusable_ffn_fraction, 0.5);
    for w in pts.windows(2).skip(1) {
        assert!(w[1].cached_over_naive <= w[0].cached_over_naive);
    }
}

#[test]
fn attention_rows_sum_to_one_except_multiplicative_u_rows() {
    let add = attention_view(3, 5, 8, 1, true).unwrap();
    assert!(add.row_sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    let mul = attention_view(3, 5, 8, 1, false).unwrap();
    assert!(mul.row_sums[..3].iter().all(|&s| s < 1.0));
    assert!(mul.row_sums[3..].iter().all(|s| (s - 1.0).abs() < 1e-12));
    for row in &add.weights[..3] {
        assert!(row[3..].iter().all(|&w| w == 0.0));
    }
    let json = serde_json::to_string(&add).unwrap();
    assert!(json.contains("\"mode\":\"additive\""));
}
