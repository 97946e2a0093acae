use super::run::{collect_suite, run_lifelong};
use super::*;
use crate::policy::PolicyConfig;

fn tiny_run(method: Method, epochs: usize) -> RunConfig {
    RunConfig {
        method,
        epochs_per_task: epochs,
        eval_every: 1,
        batch: 8,
        lr: 3e-3,
        eval_episodes: 3,
        demos_per_task: 2,
        cr_ratio: 1.0,
        consolidation_epochs: 3,
        pretrain: crate::config::PretrainConfig {
            tasks: 2,
            demos_per_task: 2,
            epochs: 1,
            batch: 8,
            ..Default::default()
        },
        policy: PolicyConfig {
            dropout: 0.0,
            ..crate::policy::tests::tiny_config()
        },
        ..RunConfig::default()
    }
}

fn setup(method: Method, epochs: usize, tasks: usize) -> (RunConfig, Vec<TaskDemos>, (Policy, ParamStore<f32>)) {
    let c = tiny_run(method, epochs);
    let specs = crate::world::generate_suite(4, crate::world::Family::Goal, tasks).unwrap();
    let suite = collect_suite(&specs, 2, 5, c.policy.grid).unwrap();
    let pre = collect_suite(&run::pretrain_suite(&c, &specs).unwrap(), 2, 5, c.policy.grid).unwrap();
    let (p, s, _) = pretrain(&c, &pre, 1).unwrap();
    (c, suite, (p, s))
}

fn all_checksums(store: &ParamStore<f32>) -> Vec<u64> {
    store.ids().map(|id| store.checksum(id)).collect()
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let (c, suite, (p, s)) = setup(Method::Dmpel, 0, 1);
    let mut l = Learner::new(c, p, s).unwrap();
    l.begin_task(0).unwrap();
    let before = all_checksums(&l.store);
    let t = l.train_on_task(0, &suite[0]).unwrap();
    assert!(t.checkpoints.is_empty());
    assert_eq!(all_checksums(&l.store), before);
}

#[test]
fn checkpoint_count_follows_eval_interval() {
    let (mut c, suite, (p, s)) = setup(Method::SeqftLora, 0, 1);
    c.epochs_per_task = 10;
    c.eval_every = 2;
    let mut l = Learner::new(c, p, s).unwrap();
    l.begin_task(0).unwrap();
    let t = l.train_on_task(0, &suite[0]).unwrap();
    let epochs: Vec<usize> = t.checkpoints.iter().map(|c| c.0).collect();
    assert_eq!(epochs, vec![2, 4, 6, 8, 10]);
    assert!(t.log.epoch_loss.iter().all(|l| l.is_finite()));
}

#[test]
fn er_without_replay_is_rejected() {
    let (mut c, _, (p, s)) = setup(Method::Er, 1, 1);
    c.replay_fraction = 0.0;
    assert!(matches!(Learner::new(c, p, s), Err(Error::Config { .. })));
}

#[test]
fn tail_oracle_never_forgets() {
    let (c, suite, base) = setup(Method::TailOracle, 2, 2);
    let r = run_lifelong(c, base, &suite, None).unwrap();
    assert_eq!(r.metrics.nbt, 0.0);
    assert!(r.frozen_intact);
    for k in 0..2 {
        assert_eq!(r.matrix.final_rates[1][k], r.matrix.final_rates[k][k]);
    }
}

#[test]
fn dmpel_run_keeps_frozen_experts_and_sparsity() {
    let (mut c, suite, base) = setup(Method::Dmpel, 2, 3);
    c.delta = 2;
    let r = run_lifelong(c, base, &suite, None).unwrap();
    assert!(r.frozen_intact);
    assert_eq!(r.coefficients.len(), 6 * 3 * 3);
    assert!(r.coefficients.iter().all(|row| (0.0..=2.0).contains(&row.mean_coefficient)));
    assert!(r.routes.vectors > 0);
    assert!(r.routes.max_active <= 2);
    assert!(r.routes.min >= 0.0 && r.routes.max <= 2.0);
    for f in &r.finalizations {
        assert!(f.cr_after.unwrap() <= f.cr_before.unwrap());
    }
    // the first task's entries were archived from the router that still produces them
    assert_eq!(r.finalizations[0].cr_before, Some(0.0));
    assert_eq!(r.learner.cr.count_for(1), suite[0].steps());
    assert_eq!(r.storage.cr_bytes, r.learner.cr.bytes());
    let l = &r.learner;
    let router = l.policy.router.as_ref().unwrap();
    for e in l.cr.entries().iter().take(20) {
        let c = router.route(&l.store, &e.context).unwrap().sparsify(2);
        for sub in crate::library::Submodule::ALL {
            assert!(c.get(sub).iter().filter(|&&x| x != 0.0).count() <= 2);
        }
    }
}

#[test]
fn restoring_the_best_checkpoint_reproduces_its_rate() {
    let (c, suite, (p, s)) = setup(Method::SeqftLora, 3, 1);
    let mut l = Learner::new(c.clone(), p, s).unwrap();
    l.begin_task(0).unwrap();
    let t = l.train_on_task(0, &suite[0]).unwrap();
    let mut rates = Vec::new();
    for (i, (_, snap)) in t.checkpoints.iter().enumerate() {
        l.store.restore(snap);
        rates.push(l.evaluate_task(&suite[0], 0, &eval_seeds(c.seed, 0, i, 4)).unwrap().success_rate);
    }
    let best = select_best_checkpoint(&rates).unwrap();
    l.store.restore(&t.checkpoints[best.index].1);
    let again = l.evaluate_task(&suite[0], 0, &eval_seeds(c.seed, 0, best.index, 4)).unwrap();
    assert_eq!(again.success_rate, best.rate);
}

#[test]
fn eval_seeds_differ_by_task_and_checkpoint() {
    let a = eval_seeds(0, 0, 0, 5);
    assert_eq!(a, eval_seeds(0, 0, 0, 5));
    assert_ne!(a, eval_seeds(0, 1, 0, 5));
    assert_ne!(a, eval_seeds(0, 0, 1, 5));
    assert_ne!(a, eval_seeds(1, 0, 0, 5));
}
