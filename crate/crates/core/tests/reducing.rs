use mwlab::bench::default_suite;
use mwlab::mesh::Cube;
use mwlab::weightlab::reducing_matrix;

// Small cubes next to a strong rotation jump give a nearly degenerate
// Newton system in the ellipsoid fit.
#[test]
fn reducing_matrix_on_sharp_cubes() {
    let cfg = default_suite(10, 5).remove(6);
    let w = cfg.build_weight().unwrap();
    for (grid, x) in [(0, 169), (1, 170), (1, 171), (2, 170), (2, 171)] {
        let cube = Cube { grid, level: 9, coords: [x, 0] };
        let r = reducing_matrix(&w, &cube).unwrap();
        assert!(r.c_lo <= 1.0 + 1e-12 && r.c_hi >= 1.0 - 1e-12, "{cube:?}");
        assert!(r.c_hi / r.c_lo <= 2f64.sqrt() * 1.05, "{cube:?}: spread {}", r.c_hi / r.c_lo);
    }
}
