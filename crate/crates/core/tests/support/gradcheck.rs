//! Central finite differences against the tape, per op and for the
//! composed networks and losses. Failures panic with the offending
//! coordinate.

use multigail::discriminators::{discriminator_batch, member_loss};
use multigail::envs::{reset, step, Action, ActionSpec, EnvConfig, EnvId, Observation, BASE_SELF_DIM};
use multigail::nn::tape::ConvGeometry;
use multigail::nn::{
    EncoderBatch, GradientTape, Gradients, Network, NetworkConfig, NetworkRole, ParameterStore, Tensor, Var,
};
use multigail::ppo::{minibatch_loss, PpoBatch, PpoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;
/// Coordinates checked per tensor in the composed checks.
const PER_TENSOR: usize = 6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares `grads` against central differences of `loss` at `store`.
/// `loss` also returns the rectifier sign pattern; a coordinate whose two
/// probes land on different linear pieces straddles a kink, where the
/// derivative is undefined, and is skipped. At most a tenth may be.
/// `None` coordinates means every coordinate.
fn compare(
    store: &ParameterStore,
    grads: &Gradients,
    loss: impl Fn(&ParameterStore) -> (f64, Vec<bool>),
    per_tensor: Option<usize>,
    rng: &mut ChaCha8Rng,
    label: &str,
) {
    let (mut checked, mut skipped) = (0usize, 0usize);
    for i in 0..store.len() {
        let len = store.by_index(i).len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < len => (0..k).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for j in coords {
            let mut s = store.clone();
            s.by_index_mut(i).data_mut()[j] += EPS;
            let (up, pu) = loss(&s);
            s.by_index_mut(i).data_mut()[j] -= 2.0 * EPS;
            let (down, pd) = loss(&s);
            if pu != pd {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(i).data()[j];
            let e = rel_err(analytic, numeric);
            assert!(
                e < REL_TOL,
                "{label}: `{}`[{j}] analytic {analytic} numeric {numeric} rel {e}",
                store.name_of(i)
            );
        }
    }
    assert!(
        skipped * 10 <= checked + skipped,
        "{label}: {skipped} of {} probes straddle a kink",
        checked + skipped
    );
}

fn pattern(net: &Network, store: &ParameterStore, batch: &EncoderBatch) -> Vec<bool> {
    let mut tape = GradientTape::new(store);
    net.forward(&mut tape, batch).unwrap();
    tape.activation_pattern()
}

/// Checks `Σ c ⊙ f(params)` for a random fixed projection `c`.
fn check_op(label: &str, shapes: &[(&str, Vec<usize>)], f: impl Fn(&mut GradientTape) -> Var) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape) in shapes {
            store.insert(*name, rand_tensor(&mut rng, shape)).unwrap();
        }
        let projected = |s: &ParameterStore, c: Option<&[f64]>| -> (f64, Gradients, Vec<f64>, Vec<bool>) {
            let mut tape = GradientTape::new(s);
            let out = f(&mut tape);
            let n = tape.value(out).len();
            let mut crng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let c: Vec<f64> = c
                .map(|c| c.to_vec())
                .unwrap_or_else(|| (0..n).map(|_| crng.gen_range(-1.0..1.0)).collect());
            let value: f64 = tape.value(out).data().iter().zip(&c).map(|(a, b)| a * b).sum();
            let shape = tape.value(out).shape().to_vec();
            let pat = tape.activation_pattern();
            let g = tape
                .backward_seeded(&[(out, Tensor::new(shape, c.clone()).unwrap())])
                .unwrap();
            (value, g, c, pat)
        };
        let (_, grads, c, _) = projected(&store, None);
        compare(
            &store,
            &grads,
            |s| {
                let (v, _, _, p) = projected(s, Some(&c));
                (v, p)
            },
            None,
            &mut rng,
            &format!("{label} seed {seed}"),
        );
    }
}

pub fn linear() {
    check_op("linear", &[("x", vec![3, 4]), ("w", vec![4, 5]), ("b", vec![5])], |t| {
        let (x, w, b) = (t.param("x").unwrap(), t.param("w").unwrap(), t.param("b").unwrap());
        t.linear(x, w, b).unwrap()
    });
}

pub fn matmul_nt() {
    check_op("matmul_nt", &[("a", vec![3, 4]), ("b", vec![2, 4])], |t| {
        let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
        t.matmul_nt(a, b).unwrap()
    });
}

pub fn elementwise() {
    check_op("add", &[("a", vec![3, 4]), ("b", vec![3, 4])], |t| {
        let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
        t.add(a, b).unwrap()
    });
    check_op("mul_const", &[("a", vec![2, 3])], |t| {
        let a = t.param("a").unwrap();
        t.mul_const(a, vec![0.5, -1.0, 2.0, 0.2, 1.0, -3.0]).unwrap()
    });
    check_op("scale", &[("a", vec![2, 3])], |t| {
        let a = t.param("a").unwrap();
        t.scale(a, -1.7).unwrap()
    });
    check_op("tanh", &[("a", vec![4, 3])], |t| {
        let a = t.param("a").unwrap();
        t.tanh(a).unwrap()
    });
    // kinks at zero are hit with probability zero
    check_op("relu", &[("a", vec![4, 3])], |t| {
        let a = t.param("a").unwrap();
        t.relu(a).unwrap()
    });
    check_op("leaky_relu", &[("a", vec![4, 3])], |t| {
        let a = t.param("a").unwrap();
        t.leaky_relu(a, 0.2).unwrap()
    });
}

pub fn shape_ops() {
    check_op("broadcast_rows", &[("a", vec![1, 3])], |t| {
        let a = t.param("a").unwrap();
        t.broadcast_rows(a, 4).unwrap()
    });
    check_op("repeat_rows", &[("a", vec![2, 3])], |t| {
        let a = t.param("a").unwrap();
        t.repeat_rows(a, 3).unwrap()
    });
    check_op("concat_cols", &[("a", vec![2, 3]), ("b", vec![2, 1])], |t| {
        let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
        t.concat_cols(&[a, b, a]).unwrap()
    });
    check_op("reshape", &[("a", vec![2, 6])], |t| {
        let a = t.param("a").unwrap();
        let r = t.reshape(a, vec![4, 3]).unwrap();
        t.tanh(r).unwrap()
    });
    check_op("mean_groups", &[("a", vec![6, 2])], |t| {
        let a = t.param("a").unwrap();
        t.mean_groups(a, 3).unwrap()
    });
    check_op("sum", &[("a", vec![3, 2])], |t| {
        let a = t.param("a").unwrap();
        let s = t.tanh(a).unwrap();
        t.sum(s).unwrap()
    });
    check_op("sum_squares", &[("a", vec![3, 2])], |t| {
        let a = t.param("a").unwrap();
        t.sum_squares(a).unwrap()
    });
}

pub fn embedding() {
    check_op("embedding", &[("table", vec![5, 3])], |t| {
        let table = t.param("table").unwrap();
        let e = t.embedding(table, vec![4, 0, 4, 2, 1, 1]).unwrap();
        t.tanh(e).unwrap()
    });
}

pub fn conv3d() {
    let geom = ConvGeometry {
        in_size: 5,
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    check_op(
        "conv3d",
        &[("x", vec![2, 125 * 2]), ("w", vec![27 * 2, 3]), ("b", vec![3])],
        move |t| {
            let (x, w, b) = (t.param("x").unwrap(), t.param("w").unwrap(), t.param("b").unwrap());
            t.conv3d(x, w, b, geom).unwrap()
        },
    );
    let unit = ConvGeometry { stride: 1, ..geom };
    check_op(
        "conv3d stride 1",
        &[("x", vec![1, 125 * 2]), ("w", vec![27 * 2, 3]), ("b", vec![3])],
        move |t| {
            let (x, w, b) = (t.param("x").unwrap(), t.param("w").unwrap(), t.param("b").unwrap());
            t.conv3d(x, w, b, unit).unwrap()
        },
    );
}

pub fn attention() {
    check_op(
        "attention",
        &[("q", vec![6, 4]), ("k", vec![6, 4]), ("v", vec![6, 4])],
        |t| {
            let (q, k, v) = (t.param("q").unwrap(), t.param("k").unwrap(), t.param("v").unwrap());
            t.attention(q, k, v, 3, 2).unwrap()
        },
    );
}

pub fn layer_norm() {
    check_op(
        "layer_norm",
        &[("x", vec![3, 5]), ("g", vec![5]), ("b", vec![5])],
        |t| {
            let (x, g, b) = (t.param("x").unwrap(), t.param("g").unwrap(), t.param("b").unwrap());
            t.layer_norm(x, g, b).unwrap()
        },
    );
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        embedding_size: 8,
        attention_heads: 2,
        conv_filters: vec![4, 6],
        voxel_embedding_size: 3,
        head_hidden: 8,
        ..Default::default()
    }
}

fn observations(env: &EnvConfig, seed: u64, n: usize) -> Vec<(Observation, Action)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut o) = reset(env, seed);
    let mut out = Vec::new();
    while out.len() < n {
        let a = match env.action_spec() {
            ActionSpec::Discrete { count } => Action::Discrete(rng.gen_range(0..count)),
            ActionSpec::Continuous { dims } => {
                Action::Continuous((0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect())
            }
        };
        let t = step(env, &s, &a).unwrap();
        out.push((o, a));
        if t.done {
            (s, o) = reset(env, seed + out.len() as u64);
        } else {
            (s, o) = (t.state, t.observation);
        }
    }
    out
}

fn projected_output(net: &Network, store: &ParameterStore, batch: &EncoderBatch, c: &[f64]) -> (f64, Gradients) {
    let mut tape = GradientTape::new(store);
    let fp = net.forward(&mut tape, batch).unwrap();
    let out = tape.value(fp.output).clone();
    let v = out.data().iter().zip(c).map(|(a, b)| a * b).sum();
    let g = tape
        .backward_seeded(&[(fp.output, Tensor::new(out.shape().to_vec(), c.to_vec()).unwrap())])
        .unwrap();
    (v, g)
}

pub fn composed_networks() {
    for id in [EnvId::Driving, EnvId::Navigation] {
        let env = EnvConfig::reference(id);
        let spec = env.action_spec();
        let ne = env.n_entities();
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = observations(&env, seed, 3);
            for role in [NetworkRole::Policy, NetworkRole::Value, NetworkRole::Discriminator] {
                let (net, batch) = if role == NetworkRole::Discriminator {
                    let b = discriminator_batch(&spec, ne, pairs.iter().map(|(o, a)| (o, a))).unwrap();
                    (
                        Network::new(tiny_net(), role, spec, b.self_dim - BASE_SELF_DIM, ne).unwrap(),
                        b,
                    )
                } else {
                    let mut b = EncoderBatch::new(BASE_SELF_DIM + 2, ne);
                    for (o, _) in &pairs {
                        b.push(o, &[rng.gen(), rng.gen()]).unwrap();
                    }
                    (Network::new(tiny_net(), role, spec, 2, ne).unwrap(), b)
                };
                let store = net.init(&mut rng);
                let n_out = batch.rows * net.output_dim();
                let c: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (_, grads) = projected_output(&net, &store, &batch, &c);
                compare(
                    &store,
                    &grads,
                    |s| (projected_output(&net, s, &batch, &c).0, pattern(&net, s, &batch)),
                    Some(PER_TENSOR),
                    &mut rng,
                    &format!("{id} {role:?} seed {seed}"),
                );
            }
        }
    }
}

pub fn discriminator_loss_with_penalty() {
    for id in [EnvId::Driving, EnvId::Navigation] {
        let env = EnvConfig::reference(id);
        let spec = env.action_spec();
        let ne = env.n_entities();
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let expert =
                discriminator_batch(&spec, ne, observations(&env, seed, 3).iter().map(|(o, a)| (o, a))).unwrap();
            let policy =
                discriminator_batch(&spec, ne, observations(&env, seed + 50, 2).iter().map(|(o, a)| (o, a))).unwrap();
            let net = Network::new(
                tiny_net(),
                NetworkRole::Discriminator,
                spec,
                expert.self_dim - BASE_SELF_DIM,
                ne,
            )
            .unwrap();
            let store = net.init(&mut rng);
            let (_, grads) = member_loss(&net, &store, &expert, &policy, 10.0).unwrap();
            let joint = expert.concat(&policy).unwrap();
            compare(
                &store,
                &grads,
                |s| {
                    let loss = member_loss(&net, s, &expert, &policy, 10.0).unwrap().0.loss;
                    (loss, pattern(&net, s, &joint))
                },
                Some(PER_TENSOR),
                &mut rng,
                &format!("{id} discriminator loss seed {seed}"),
            );
        }
    }
}

pub fn ppo_minibatch_loss() {
    for id in [EnvId::Driving, EnvId::Navigation] {
        let env = EnvConfig::reference(id);
        let spec = env.action_spec();
        let ne = env.n_entities();
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pnet = Network::new(tiny_net(), NetworkRole::Policy, spec, 2, ne).unwrap();
            let vnet = Network::new(tiny_net(), NetworkRole::Value, spec, 2, ne).unwrap();
            let pstore = pnet.init(&mut rng);
            let vstore = vnet.init(&mut rng);
            let mut inputs = EncoderBatch::new(BASE_SELF_DIM + 2, ne);
            let pairs = observations(&env, seed, 4);
            for (o, _) in &pairs {
                inputs.push(o, &[1.0, 0.0]).unwrap();
            }
            let dists = pnet.distributions(&pstore, &inputs).unwrap();
            let mut batch = PpoBatch {
                inputs,
                actions: Vec::new(),
                raws: Vec::new(),
                log_probs_old: Vec::new(),
                advantages: Vec::new(),
                returns: Vec::new(),
            };
            // old log-probs well inside, below and above the clip window
            let shifts = [0.05, 0.6, -0.6, 0.0];
            for (r, d) in dists.iter().enumerate() {
                let s = d.sample(&mut rng);
                batch.log_probs_old.push(s.log_prob + shifts[r]);
                batch.actions.push(s.action);
                batch.raws.push(s.raw);
                batch.advantages.push(rng.gen_range(-1.0..1.0));
                batch.returns.push(rng.gen_range(-1.0..1.0));
            }
            let cfg = PpoConfig::default();
            let (_, pg, vg) = minibatch_loss(&pnet, &pstore, &vnet, &vstore, &batch, &cfg).unwrap();
            let label = format!("{id} ppo seed {seed}");
            compare(
                &pstore,
                &pg,
                |s| {
                    let l = minibatch_loss(&pnet, s, &vnet, &vstore, &batch, &cfg).unwrap().0.total;
                    (l, pattern(&pnet, s, &batch.inputs))
                },
                Some(PER_TENSOR),
                &mut rng,
                &label,
            );
            compare(
                &vstore,
                &vg,
                |s| {
                    let l = minibatch_loss(&pnet, &pstore, &vnet, s, &batch, &cfg).unwrap().0.total;
                    (l, pattern(&vnet, s, &batch.inputs))
                },
                Some(PER_TENSOR),
                &mut rng,
                &label,
            );
        }
    }
}
