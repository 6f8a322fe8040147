//! One discriminator, careful driving against random driving.

use multigail::discriminators::{discriminator_batch, member_loss, DiscriminatorSet};
use multigail::envs::{reset, step, Action, EnvConfig, EnvId, Observation};
use multigail::experts::{record_demos, ExpertSampler, Persona};
use multigail::nn::{AdamConfig, NetworkConfig};
use multigail::parallel::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_net() -> NetworkConfig {
    NetworkConfig {
        embedding_size: 16,
        attention_heads: 4,
        conv_filters: vec![8, 16, 16],
        voxel_embedding_size: 4,
        head_hidden: 32,
        ..Default::default()
    }
}

fn random_pairs(cfg: &EnvConfig, n: usize, seed: u64) -> Vec<(Observation, Action)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let (mut s, mut o) = reset(cfg, rng.gen());
        while !s.done && out.len() < n {
            let a = Action::Continuous(vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]);
            let t = step(cfg, &s, &a).unwrap();
            out.push((o, a));
            o = t.observation;
            s = t.state;
        }
    }
    out
}

/// Trains one discriminator on careful demonstrations against uniform
/// random driving and returns the first update count (checked every 50)
/// at which held-out accuracy reaches 90%, with the last accuracy seen.
pub fn careful_vs_random() -> (Option<usize>, f64) {
    let cfg = EnvConfig::reference(EnvId::Driving);
    let demos = record_demos(Persona::Careful, &cfg, 3000, 1).unwrap();
    let expert: Vec<_> = demos.pairs().map(|(o, a)| (o.clone(), a.clone())).collect();
    let random = random_pairs(&cfg, 3000, 2);
    let (e_train, e_test) = expert.split_at(2400);
    let (r_train, r_test) = random.split_at(2400);
    let spec = cfg.action_spec();
    let ne = cfg.n_entities();
    let batch = |v: &[(Observation, Action)], idx: &[usize]| {
        discriminator_batch(&spec, ne, idx.iter().map(|&i| (&v[i].0, &v[i].1))).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut set = DiscriminatorSet::new(
        small_net(),
        spec,
        ne,
        &["careful".to_string()],
        AdamConfig::default(),
        10.0,
        &mut rng,
    )
    .unwrap();
    let mut se = ExpertSampler::new(e_train.len());
    let mut sr = ExpertSampler::new(r_train.len());
    let test_e = batch(e_test, &(0..e_test.len()).collect::<Vec<_>>());
    let test_r = batch(r_test, &(0..r_test.len()).collect::<Vec<_>>());
    let (mut reached, mut accuracy) = (None, 0.0);
    for it in 1..=2000 {
        let eb = batch(e_train, &se.next_batch(128, &mut rng).unwrap());
        let rb = batch(r_train, &sr.next_batch(128, &mut rng).unwrap());
        set.update(&[eb], &rb, Execution::Sequential).unwrap();
        if it % 50 == 0 {
            let (stats, _) = member_loss(&set.net, &set.members[0].params, &test_e, &test_r, 10.0).unwrap();
            accuracy = stats.accuracy;
            if accuracy >= 0.9 {
                reached = Some(it);
                break;
            }
        }
    }
    (reached, accuracy)
}
