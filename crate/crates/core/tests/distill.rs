use epd_core::distill::{train_distill, DistillConfig};
use epd_core::eval::{endpoint_error, oracle_endpoints};
use epd_core::toy::{prior_sample, GmmModel};
use epd_core::{integrate, make_schedule, ScheduleKind, Solver};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> DistillConfig {
    DistillConfig {
        epochs: 40,
        pool_size: 256,
        batch_size: 32,
        ..DistillConfig::default()
    }
}

#[test]
fn one_dimensional_gaussian_loss_drops_tenfold() {
    let g = GmmModel::single(vec![1.5], 0.7);
    let s = make_schedule(ScheduleKind::Polynomial, 2, 0.002, 80.0, 7.0).unwrap();
    let run = train_distill(&g, &s, &quick(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let first = run.loss_history.first().unwrap().per_step[0];
    let last = run.loss_history.last().unwrap().per_step[0];
    assert!(last <= 0.1 * first, "L_0 {first:e} -> {last:e}");
}

#[test]
fn distilled_gmm_solver_beats_euler() {
    let g = GmmModel::default_validation();
    let s = make_schedule(ScheduleKind::Polynomial, 2, 0.002, 80.0, 7.0).unwrap();
    let cfg = quick();
    let run = train_distill(&g, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let ckpt = run.checkpoint(&s, &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let xs: Vec<Vec<f64>> = (0..256).map(|_| prior_sample(2, 80.0, &mut rng)).collect();
    let oracle = oracle_endpoints(&g, &xs, 0.002, 80.0).unwrap();
    let run_all = |solver: &Solver, sched, afs| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|x| {
                integrate(&g, solver, sched, x, afs)
                    .unwrap()
                    .endpoint()
                    .to_vec()
            })
            .collect()
    };
    let ours = endpoint_error(&run_all(&ckpt.solver(), &ckpt.schedule, true), &oracle).unwrap();
    // Three sequential rounds: Euler gets four steps with the analytical first one.
    let e4 = make_schedule(ScheduleKind::Polynomial, 4, 0.002, 80.0, 7.0).unwrap();
    let euler = endpoint_error(&run_all(&Solver::Euler, &e4, true), &oracle).unwrap();
    assert!(ours < euler, "epd {ours} vs euler {euler}");
}
