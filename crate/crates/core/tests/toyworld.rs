use gradcore::Rng;
use lamp::toyworld::dataset::demonstrate;
use lamp::toyworld::{progress_score, reset, TaskKind, TaskSpec, EXPERT_BUDGET};

#[test]
fn expert_succeeds_on_seeded_episodes() {
    let mut solved = 0;
    let mut lengths = vec![0usize; 3];
    let n = 500;
    for seed in 0..n {
        let kind = TaskKind::ALL[seed % 3];
        let mut rng = Rng::new(10_000 + seed as u64);
        let task = TaskSpec::sample(kind, &mut rng);
        let init = reset(&task, &mut rng).unwrap();
        if let Some((states, actions)) = demonstrate(init, &task, EXPERT_BUDGET) {
            if progress_score(&states, &task) == 1.0 {
                solved += 1;
            }
            lengths[seed % 3] = lengths[seed % 3].max(actions.len());
        }
    }
    println!("solved {solved}/{n}, longest per kind {lengths:?}");
    assert!(solved as f64 >= 0.99 * n as f64);
}
