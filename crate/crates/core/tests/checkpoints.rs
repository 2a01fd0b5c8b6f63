use std::path::PathBuf;

use epd_core::checkpoint::{Checkpoint, Stage};
use epd_core::params::on_simplex;
use epd_core::toy::GmmModel;
use epd_core::{integrate, SolverKind};

fn fixture(nfe: usize) -> Checkpoint {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join(format!("tests/fixtures/cifar10_k2_nfe{nfe}.json"));
    Checkpoint::load(path).unwrap()
}

#[test]
fn published_rows_load_and_validate() {
    for nfe in [3, 5, 7, 9] {
        let c = fixture(nfe);
        assert_eq!(c.stage, Stage::Distill);
        assert_eq!(c.branches(), 2);
        assert!(c.afs);
        assert_eq!(c.variant, SolverKind::Epd);
        // With AFS every step costs two rounds except the first.
        assert_eq!(2 * c.schedule.n_steps() - 1, nfe);
        for (n, raw) in c.params.iter().enumerate() {
            let f = raw.factors();
            assert!(
                f.s.iter().chain(&f.sigma).all(|v| (v - 1.0).abs() <= 0.05),
                "nfe {nfe} step {n}"
            );
            let (t_cur, t_next) = c.schedule.interval(n);
            let m = raw.materialize(t_cur, t_next);
            assert!(on_simplex(&m.lambda));
            m.validate(t_cur, t_next).unwrap();
        }
    }
}

#[test]
fn published_rows_survive_a_round_trip() {
    for nfe in [3, 5, 7, 9] {
        let c = fixture(nfe);
        let again = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
    }
}

#[test]
fn published_rows_drive_the_solver() {
    let g = GmmModel::default_validation();
    for nfe in [3, 5, 7, 9] {
        let c = fixture(nfe);
        let t = integrate(&g, &c.solver(), &c.schedule, &[35.0, -60.0], c.afs).unwrap();
        assert_eq!(t.nfe_parallel, nfe);
        assert!(t.endpoint().iter().all(|v| v.is_finite()));
    }
}
