use hbaf_py::matrix;

#[test]
fn rows_become_a_row_major_matrix() {
    let m = matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    assert_eq!(m.dim(), (2, 3));
    assert_eq!(m[[1, 0]], 4.0);
    assert_eq!(m[[0, 2]], 3.0);
}

#[test]
fn ragged_rows_are_rejected() {
    let err = matrix(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
    assert!(err.to_string().contains("matrix rows"), "{err}");
}

#[test]
fn empty_input_is_an_empty_matrix() {
    assert_eq!(matrix(&[]).unwrap().dim(), (0, 0));
}
