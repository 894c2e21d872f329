//! Graph structure learning: a convolutional global encoder over each
//! node's full training series, node embeddings mixing the dynamic
//! aggregator output with the static global feature, pairwise two-class
//! edge logits, the cross-entropy regularizer against the retrieval
//! adjacency, and Gumbel-softmax sampling of a soft adjacency.

use crate::error::{LmhrError, Result};
use crate::numerics::nn::{linear, mlp, register_linear, register_mlp};
use crate::numerics::optim::{ParamGroup, ParamVars};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// model width of Z and F_G
    pub d: usize,
    /// channels of the two global-encoder convolutions
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// hidden width of the pairwise edge MLP
    pub pair_hidden: usize,
    /// Gumbel-softmax temperature
    pub tau: f64,
    /// input channels of the raw series
    pub n_channels: usize,
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(LmhrError::config(format!(
                "graph: tau = {} must be > 0",
                self.tau
            )));
        }
        if self.d == 0 || self.conv_channels == 0 || self.conv_kernel == 0 {
            return Err(LmhrError::config("graph: dims must be >= 1"));
        }
        Ok(())
    }

    /// Receptive field of the stacked convolutions.
    pub fn receptive_field(&self) -> usize {
        2 * (self.conv_kernel - 1) + 1
    }
}

pub fn register<T: Scalar>(group: &mut ParamGroup<T>, cfg: &GraphConfig) {
    let cc = cfg.conv_channels;
    let k = cfg.conv_kernel;
    group.add(
        "conv1.w",
        vec![cc, cfg.n_channels * k],
        crate::numerics::optim::InitSpec::XavierUniform,
    );
    group.add("conv1.b", vec![1, cc], crate::numerics::optim::InitSpec::Zeros);
    crate::numerics::nn::register_layer_norm(group, "norm1", cc);
    group.add(
        "conv2.w",
        vec![cc, cc * k],
        crate::numerics::optim::InitSpec::XavierUniform,
    );
    group.add("conv2.b", vec![1, cc], crate::numerics::optim::InitSpec::Zeros);
    crate::numerics::nn::register_layer_norm(group, "norm2", cc);
    register_linear(group, "fc", cc, cfg.d);
    register_mlp(group, "node", &[cfg.d, cfg.d, cfg.d]);
    register_mlp(group, "pair", &[2 * cfg.d, cfg.pair_hidden, 2]);
}

/// Global feature per node: two 1-D convolutions with channel
/// normalization and a rectifier, temporal mean pooling, then a fully
/// connected map to the model width. Deterministic given parameters.
pub fn global_encode<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &GraphConfig,
    series: &[Tensor<T>],
) -> Result<Var> {
    let rf = cfg.receptive_field();
    let mut rows = Vec::with_capacity(series.len());
    for s in series {
        let (t_len, _) = s.dims2()?;
        if t_len < rf {
            return Err(LmhrError::config(format!(
                "global encoder: series length {t_len} shorter than receptive field {rf}"
            )));
        }
        let x = tape.constant(s.clone())?;
        let w1 = vars.get("graph.conv1.w")?;
        let b1 = vars.get("graph.conv1.b")?;
        let pad = cfg.conv_kernel - 1;
        let h = tape.conv1d(x, w1, b1, cfg.conv_kernel, 1, pad)?;
        let h = crate::numerics::nn::layer_norm(tape, vars, "graph.norm1", h)?;
        let h = tape.relu(h)?;
        let w2 = vars.get("graph.conv2.w")?;
        let b2 = vars.get("graph.conv2.b")?;
        let h = tape.conv1d(h, w2, b2, cfg.conv_kernel, 1, pad)?;
        let h = crate::numerics::nn::layer_norm(tape, vars, "graph.norm2", h)?;
        let h = tape.relu(h)?;
        let pooled = tape.mean_rows(h)?;
        rows.push(linear(tape, vars, "graph.fc", pooled)?);
    }
    tape.concat_rows(&rows)
}

/// Z = MLP(AO) + F_G, both N x d.
pub fn node_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    ao: Var,
    f_g: Var,
) -> Result<Var> {
    if tape.value(ao).shape() != tape.value(f_g).shape() {
        return Err(LmhrError::shape(format!(
            "node embedding: AO {:?} vs F_G {:?}",
            tape.value(ao).shape(),
            tape.value(f_g).shape()
        )));
    }
    let m = mlp(tape, vars, "graph.node", ao, 2)?;
    tape.add(m, f_g)
}

/// Two-class logits for every ordered pair: Theta_ij = MLP(Z_i || Z_j),
/// returned as an N^2 x 2 matrix in (i, j) row-major order. All pairs are
/// evaluated in one batched MLP call.
pub fn pairwise_theta<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, z: Var) -> Result<Var> {
    let (n, _) = tape.value(z).dims2()?;
    if n < 2 {
        return Err(LmhrError::config("pairwise theta needs N >= 2"));
    }
    let mut left_idx = Vec::with_capacity(n * n);
    let mut right_idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            left_idx.push(i);
            right_idx.push(j);
        }
    }
    let left = tape.gather_rows(z, &left_idx)?;
    let right = tape.gather_rows(z, &right_idx)?;
    let pairs = tape.concat_cols(&[left, right])?;
    mlp(tape, vars, "graph.pair", pairs, 2)
}

/// Edge probabilities softmax(Theta) (the edge-class column), N^2 x 1.
pub fn edge_probs<T: Scalar>(tape: &mut Tape<T>, theta: Var) -> Result<Var> {
    let probs = tape.softmax_rows(theta)?;
    tape.slice_cols(probs, 0, 1)
}

/// Cross-entropy between the edge probabilities and the binary retrieval
/// adjacency, averaged over all ordered pairs. Probabilities are clamped to
/// [1e-7, 1 - 1e-7] before the logs.
pub fn graph_loss<T: Scalar>(tape: &mut Tape<T>, theta: Var, a_r: &[u8]) -> Result<Var> {
    let (pairs, two) = tape.value(theta).dims2()?;
    if two != 2 {
        return Err(LmhrError::shape(format!(
            "graph loss: theta must be pairs x 2, got {pairs}x{two}"
        )));
    }
    if a_r.len() != pairs {
        return Err(LmhrError::shape(format!(
            "graph loss: adjacency has {} entries for {pairs} pairs",
            a_r.len()
        )));
    }
    if a_r.iter().any(|&v| v > 1) {
        return Err(LmhrError::config("graph loss: adjacency must be binary"));
    }
    let p = edge_probs(tape, theta)?;
    let p = tape.clamp(p, T::of(1e-7), T::of(1.0 - 1e-7))?;
    let a = tape.constant(Tensor::new(
        vec![pairs, 1],
        a_r.iter().map(|&v| T::of(v as f64)).collect(),
    )?)?;
    let ln_p = tape.ln(p)?;
    let pos = tape.mul(a, ln_p)?;
    let one_minus_p = {
        let neg = tape.neg(p)?;
        tape.add_scalar(neg, T::one())?
    };
    let one_minus_a = {
        let neg = tape.neg(a)?;
        tape.add_scalar(neg, T::one())?
    };
    let ln_q = tape.ln(one_minus_p)?;
    let neg_term = tape.mul(one_minus_a, ln_q)?;
    let sum = tape.add(pos, neg_term)?;
    let mean = tape.mean_all(sum)?;
    tape.neg(mean)
}

/// i.i.d. Gumbel(0,1) noise for every (pair, class).
pub fn gumbel_noise<T: Scalar>(pairs: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data: Vec<T> = (0..pairs * 2)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            T::of(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(vec![pairs, 2], data).expect("noise shape")
}

/// Gumbel-softmax relaxation with injected noise: the edge-class coordinate
/// of softmax((Theta + g) / tau), reshaped to N x N. Differentiable in
/// Theta; `g` enters as a constant.
pub fn gumbel_sample_with<T: Scalar>(
    tape: &mut Tape<T>,
    theta: Var,
    tau: f64,
    noise: &Tensor<T>,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(LmhrError::config(format!("gumbel: tau = {tau} must be > 0")));
    }
    let (pairs, _) = tape.value(theta).dims2()?;
    let n = (pairs as f64).sqrt() as usize;
    if n * n != pairs {
        return Err(LmhrError::shape(format!(
            "gumbel: {pairs} pairs is not a square adjacency"
        )));
    }
    let g = tape.constant(noise.clone())?;
    let shifted = tape.add(theta, g)?;
    let scaled = tape.scale(shifted, T::of(1.0 / tau))?;
    let probs = tape.softmax_rows(scaled)?;
    let edge = tape.slice_cols(probs, 0, 1)?;
    tape.reshape(edge, n, n)
}

/// Draw fresh Gumbel noise from `rng` and relax.
pub fn gumbel_sample<T: Scalar>(
    tape: &mut Tape<T>,
    theta: Var,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (pairs, _) = tape.value(theta).dims2()?;
    let noise = gumbel_noise::<T>(pairs, rng);
    gumbel_sample_with(tape, theta, tau, &noise)
}

/// Noise-free adjacency for evaluation: softmax(Theta) edge column as N x N.
pub fn adjacency_probs<T: Scalar>(tape: &mut Tape<T>, theta: Var) -> Result<Var> {
    let (pairs, _) = tape.value(theta).dims2()?;
    let n = (pairs as f64).sqrt() as usize;
    if n * n != pairs {
        return Err(LmhrError::shape(format!(
            "adjacency probs: {pairs} pairs is not a square adjacency"
        )));
    }
    let edge = edge_probs(tape, theta)?;
    tape.reshape(edge, n, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, random_tensor};
    use crate::numerics::optim::ParamSet;
    use rand::SeedableRng;

    fn cfg_small() -> GraphConfig {
        GraphConfig {
            d: 6,
            conv_channels: 4,
            conv_kernel: 3,
            pair_hidden: 8,
            tau: 0.5,
            n_channels: 2,
        }
    }

    fn init_params(cfg: &GraphConfig, seed: u64) -> ParamSet<f64> {
        let mut g = ParamGroup::new("graph");
        register(&mut g, cfg);
        let mut set = ParamSet::new();
        set.push_group(g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for gr in set.groups.iter_mut() {
            gr.init_all(&mut rng);
        }
        set
    }

    #[test]
    fn zero_series_zero_biases_give_zero_feature() {
        let cfg = cfg_small();
        let set = init_params(&cfg, 1);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let series = vec![Tensor::zeros(vec![40, 2]); 3];
        let f = global_encode(&mut tape, &vars, &cfg, &series).unwrap();
        assert_eq!(tape.value(f).shape(), &[3, 6]);
        for &v in tape.value(f).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn global_feature_width_and_determinism() {
        let cfg = GraphConfig {
            d: 96,
            ..cfg_small()
        };
        let set = init_params(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series = vec![random_tensor(vec![60, 2], 1.0, &mut rng)];
        let run = || {
            let mut tape = Tape::<f64>::new();
            let vars = set.load_on_tape(&mut tape).unwrap();
            let f = global_encode(&mut tape, &vars, &cfg, &series).unwrap();
            tape.value(f).data().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 96);
        assert_eq!(a, run());
    }

    #[test]
    fn short_series_is_a_config_error() {
        let cfg = cfg_small();
        let set = init_params(&cfg, 4);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let series = vec![Tensor::zeros(vec![cfg.receptive_field() - 1, 2])];
        assert!(global_encode(&mut tape, &vars, &cfg, &series).is_err());
    }

    #[test]
    fn node_embedding_degenerate_cases() {
        let cfg = cfg_small();
        let mut set = init_params(&cfg, 5);
        for (name, t) in set.iter_mut() {
            if name.starts_with("graph.node") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ao = tape.constant(random_tensor(vec![3, 6], 1.0, &mut rng)).unwrap();
        let fg = tape.constant(random_tensor(vec![3, 6], 1.0, &mut rng)).unwrap();
        let z = node_embedding(&mut tape, &vars, ao, fg).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(fg).data());

        // zero F_G leaves only the MLP path
        let set2 = init_params(&cfg, 7);
        let mut tape2 = Tape::<f64>::new();
        let vars2 = set2.load_on_tape(&mut tape2).unwrap();
        let ao2 = tape2.constant(tape.value(ao).clone()).unwrap();
        let zero = tape2.constant(Tensor::zeros(vec![3, 6])).unwrap();
        let z2 = node_embedding(&mut tape2, &vars2, ao2, zero).unwrap();
        let direct = mlp(&mut tape2, &vars2, "graph.node", ao2, 2).unwrap();
        assert_eq!(tape2.value(z2).data(), tape2.value(direct).data());
    }

    #[test]
    fn identical_embeddings_give_identical_logits_and_order_matters() {
        let cfg = cfg_small();
        let set = init_params(&cfg, 8);
        let mut tape = Tape::<f64>::new();
        let vars = set.load_on_tape(&mut tape).unwrap();
        let row: Vec<f64> = (0..6).map(|i| 0.2 * i as f64).collect();
        let mut same = row.clone();
        same.extend_from_slice(&row);
        let z_same = tape
            .constant(Tensor::from_f64s(vec![2, 6], &same).unwrap())
            .unwrap();
        let theta = pairwise_theta(&mut tape, &vars, z_same).unwrap();
        let tv = tape.value(theta);
        for p in 1..4 {
            assert_eq!(tv.at2(p, 0), tv.at2(0, 0));
            assert_eq!(tv.at2(p, 1), tv.at2(0, 1));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = tape.constant(random_tensor(vec![3, 6], 1.0, &mut rng)).unwrap();
        let theta2 = pairwise_theta(&mut tape, &vars, z).unwrap();
        let tv2 = tape.value(theta2);
        // theta_01 vs theta_10: ordered concat, generally different
        assert_ne!(tv2.at2(1, 0), tv2.at2(3, 0));
    }

    #[test]
    fn graph_loss_hand_values() {
        // theta [0,0] -> p = 0.5; single pair
        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(Tensor::from_f64s(vec![1, 2], &[0.0, 0.0]).unwrap()).unwrap();
        let l1 = graph_loss(&mut tape, theta, &[1]).unwrap();
        assert!((tape.value(l1).data()[0] - 0.6931471805599453).abs() < 1e-9);
        let l0 = graph_loss(&mut tape, theta, &[0]).unwrap();
        assert!((tape.value(l0).data()[0] - 0.6931471805599453).abs() < 1e-9);

        // probabilities matching the target drive the loss to zero
        let sharp = tape
            .leaf(Tensor::from_f64s(vec![2, 2], &[20.0, -20.0, -20.0, 20.0]).unwrap())
            .unwrap();
        let l = graph_loss(&mut tape, sharp, &[1, 0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);

        assert!(graph_loss(&mut tape, theta, &[2]).is_err());
    }

    #[test]
    fn graph_loss_monotone_toward_target() {
        let mut prev = f64::INFINITY;
        for logit in [0.0f64, 0.5, 1.0, 2.0, 4.0] {
            let mut tape = Tape::<f64>::new();
            let theta = tape
                .leaf(Tensor::from_f64s(vec![1, 2], &[logit, 0.0]).unwrap())
                .unwrap();
            let l = graph_loss(&mut tape, theta, &[1]).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v < prev, "loss did not decrease at logit {logit}");
            prev = v;
        }
    }

    #[test]
    fn graph_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = random_tensor(vec![9, 2], 1.5, &mut rng);
        let a_r = vec![0u8, 1, 0, 1, 0, 0, 1, 0, 0];
        let err = grad_check(
            move |tape, vars| graph_loss(tape, vars[0], &a_r),
            &[theta],
        )
        .unwrap();
        assert!(err < 1e-4, "graph loss grad rel err {err}");
    }

    #[test]
    fn gumbel_zero_noise_recovers_tempered_softmax() {
        let mut tape = Tape::<f64>::new();
        let theta = tape
            .leaf(Tensor::from_f64s(vec![1, 2], &[2.0, 0.0]).unwrap())
            .unwrap();
        let zero = Tensor::zeros(vec![1, 2]);
        let a = gumbel_sample_with(&mut tape, theta, 1.0, &zero).unwrap();
        assert!((tape.value(a).data()[0] - 0.8807970779778823).abs() < 1e-9);
        // tau -> 0 approaches the argmax indicator
        let sharp = gumbel_sample_with(&mut tape, theta, 0.01, &zero).unwrap();
        assert!(tape.value(sharp).data()[0] > 0.999999);
    }

    #[test]
    fn gumbel_pairs_sum_to_one_and_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta_t = random_tensor(vec![16, 2], 1.0, &mut rng);
        let run = |seed: u64| {
            let mut tape = Tape::<f64>::new();
            let theta = tape.leaf(theta_t.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gumbel_sample(&mut tape, theta, 0.5, &mut rng).unwrap();
            tape.value(a).data().to_vec()
        };
        let a1 = run(7);
        let a2 = run(7);
        assert_eq!(a1, a2);
        let a3 = run(8);
        assert_ne!(a1, a3);
        for &v in &a1 {
            assert!(v > 0.0 && v < 1.0);
        }
        assert!(run(7).len() == 16);

        let mut tape = Tape::<f64>::new();
        let theta = tape.leaf(theta_t.clone()).unwrap();
        assert!(gumbel_sample_with(&mut tape, theta, 0.0, &Tensor::zeros(vec![16, 2])).is_err());
    }

    #[test]
    fn gumbel_gradient_flows_to_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = random_tensor(vec![4, 2], 1.0, &mut rng);
        let noise = random_tensor(vec![4, 2], 1.0, &mut rng);
        let err = grad_check(
            move |tape, vars| {
                let noise_t = Tensor::new(vec![4, 2], noise.data().to_vec()).unwrap();
                gumbel_sample_with(tape, vars[0], 0.5, &noise_t)
            },
            &[theta],
        )
        .unwrap();
        assert!(err < 1e-4, "gumbel grad rel err {err}");
    }

    #[test]
    fn empirical_edge_frequency_tracks_softmax() {
        // Gumbel-max: at small tau the argmax class frequency equals the
        // softmax probability of the logits
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = [1.2f64, -0.4];
        let p_edge = (logits[0]).exp() / ((logits[0]).exp() + (logits[1]).exp());
        let draws = 160 * 160; // gumbel_sample_with reshapes pairs to a square
        let theta_rows: Vec<f64> = (0..draws).flat_map(|_| logits).collect();
        let mut tape = Tape::<f64>::new();
        let theta = tape
            .leaf(Tensor::from_f64s(vec![draws, 2], &theta_rows).unwrap())
            .unwrap();
        let noise = gumbel_noise::<f64>(draws, &mut rng);
        let scaled = gumbel_sample_with(&mut tape, theta, 0.1, &noise).unwrap();
        let freq = tape.value(scaled).data().iter().filter(|&&v| v > 0.5).count() as f64
            / draws as f64;
        assert!((freq - p_edge).abs() < 0.02, "freq {freq} vs p {p_edge}");
    }
}
