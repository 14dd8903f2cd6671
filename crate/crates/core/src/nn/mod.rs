//! Feed-forward classifier with exact gradients and SGD training.

mod matrix;
mod mlp;
mod params;
mod train;

pub use matrix::Matrix;
pub use mlp::{argmax, cross_entropy, softmax_rows, Activation, Batch, Mlp, ModelSpec};
pub use params::{LayerInfo, ParamVector, Tensor};
pub use train::{local_train, sgd_step, SgdConfig};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(input: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            input_dim: input,
            hidden_dims: hidden,
            num_classes: classes,
            activation: Activation::Tanh,
            init_seed: seed,
        }
    }

    fn random_batch(n: usize, dims: usize, classes: usize, seed: u64) -> Batch {
        let mut rng = crate::seed::rng(seed);
        let data = (0..n * dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(Matrix::new(n, dims, data).unwrap(), labels).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let m = Mlp::new(spec(4, vec![8], 3, 11)).unwrap();
        let a = m.init_params();
        let b = m.init_params();
        assert!(a.bitwise_eq(&b));
        assert_eq!(a.total_len(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(m.spec().param_count(), 67);
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.layers()[0].values.iter().all(|v| v.abs() <= limit));
        assert!(a.layers()[1].values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_hidden_rejected() {
        assert!(matches!(
            Mlp::new(spec(4, vec![], 3, 0)),
            Err(crate::Error::InvalidModelSpec(_))
        ));
        assert!(Mlp::new(spec(4, vec![3], 1, 0)).is_err());
        assert!(Mlp::new(spec(0, vec![3], 2, 0)).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let m = Mlp::new(spec(3, vec![5], 4, 1)).unwrap();
        let p = m.init_params().zeros_like();
        let b = random_batch(6, 3, 4, 2);
        let z = m.forward(&p, &b.inputs).unwrap();
        assert_eq!(z.rows(), 6);
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_hand_computed_logits() {
        // 2 -> 2 (relu) -> 2; expected values from a standalone script.
        let m = Mlp::new(ModelSpec {
            activation: Activation::Relu,
            ..spec(2, vec![2], 2, 0)
        })
        .unwrap();
        let p = ParamVector::new(vec![
            Tensor::new("fc0.weight", vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
            Tensor::new("fc0.bias", vec![2], vec![0.1, -0.2]).unwrap(),
            Tensor::new("fc1.weight", vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            Tensor::new("fc1.bias", vec![2], vec![0.05, 0.0]).unwrap(),
        ]);
        let x = Matrix::new(1, 2, vec![1.5, -0.5]).unwrap();
        let z = m.forward(&p, &x).unwrap();
        assert_relative_eq!(z.get(0, 0), -1.275, epsilon = 1e-12);
        assert_relative_eq!(z.get(0, 1), 6.025, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let m = Mlp::new(spec(3, vec![5], 4, 1)).unwrap();
        let p = m.init_params();
        let x = Matrix::zeros(2, 4);
        assert!(matches!(
            m.forward(&p, &x),
            Err(crate::Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn row_permutation_permutes_logits() {
        let m = Mlp::new(spec(3, vec![5], 4, 3)).unwrap();
        let p = m.init_params();
        let b = random_batch(5, 3, 4, 4);
        let perm = [3, 0, 4, 1, 2];
        let z = m.forward(&p, &b.inputs).unwrap();
        let zp = m.forward(&p, &b.inputs.select_rows(&perm)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(zp.row(i), z.row(src));
        }
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Matrix::new(2, 10, vec![0.7; 20]).unwrap();
        assert_relative_eq!(
            cross_entropy(&uniform, &[3, 9]).unwrap(),
            10f64.ln(),
            epsilon = 1e-12
        );

        let confident = Matrix::new(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        let l = cross_entropy(&confident, &[1]).unwrap();
        assert!(l.is_finite() && l < 1e-12);

        // Reference from 50-digit arithmetic.
        let logits = Matrix::from_rows(&[
            vec![0.3, -1.2, 2.5],
            vec![1.0, 1.0, -0.5],
            vec![-2.0, 0.7, 0.1],
            vec![4.0, -3.0, 0.0],
        ])
        .unwrap();
        assert_relative_eq!(
            cross_entropy(&logits, &[2, 0, 1, 1]).unwrap(),
            2.106_255_586_866_539,
            max_relative = 1e-14
        );
    }

    fn max_fd_rel_error(m: &Mlp, p: &ParamVector, b: &Batch) -> f64 {
        let g = m.gradient(p, b).unwrap();
        let h = 1e-5;
        let flat = p.to_flat();
        let dir = p.directory();
        let mut worst: f64 = 0.0;
        for (i, ga) in g.iter().enumerate() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = m
                .loss(&ParamVector::from_directory(&dir, &plus).unwrap(), b)
                .unwrap();
            let lm = m
                .loss(&ParamVector::from_directory(&dir, &minus).unwrap(), b)
                .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for trial in 0..20u64 {
            let act = if trial % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let m = Mlp::new(ModelSpec {
                activation: act,
                ..spec(4, vec![8], 3, 100 + trial)
            })
            .unwrap();
            let mut p = m.init_params();
            // Nonzero biases so every path is exercised.
            let mut rng = crate::seed::rng(trial);
            p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            let b = random_batch(7, 4, 3, 200 + trial);
            let err = max_fd_rel_error(&m, &p, &b);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn output_bias_gradient_vanishes_for_balanced_labels() {
        let m = Mlp::new(spec(2, vec![3], 2, 0)).unwrap();
        let p = m.init_params().zeros_like();
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.5],
            vec![-1.0, 0.5],
        ])
        .unwrap();
        let b = Batch::new(x, vec![0, 1, 0, 1]).unwrap();
        let g = m.gradient(&p, &b).unwrap();
        assert!(g.layers()[3].values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = Mlp::new(spec(3, vec![4], 3, 9)).unwrap();
        let p = m.init_params();
        let b = random_batch(5, 3, 3, 10);
        let doubled = Batch::new(
            b.inputs.vstack(&b.inputs).unwrap(),
            b.labels.iter().chain(&b.labels).copied().collect(),
        )
        .unwrap();
        let g1 = m.gradient(&p, &b).unwrap();
        let g2 = m.gradient(&p, &doubled).unwrap();
        for (a, c) in g1.iter().zip(g2.iter()) {
            assert_relative_eq!(a, c, epsilon = 1e-14, max_relative = 1e-12);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let theta = ParamVector::from_flat(vec![1.0, -2.0]);
        let grad = ParamVector::from_flat(vec![0.5, 0.5]);
        let cfg = SgdConfig {
            learning_rate: 0.01,
            weight_decay: 4e-5,
            ..SgdConfig::default()
        };
        let out = sgd_step(&theta, &grad, &cfg).unwrap().to_flat();
        assert_relative_eq!(out[0], 0.994_999_6, epsilon = 1e-15);
        assert_relative_eq!(out[1], -2.004_999_2, epsilon = 1e-15);

        let frozen = SgdConfig {
            learning_rate: 0.0,
            ..cfg.clone()
        };
        // η = 0 is rejected by validation but the arithmetic is still the identity.
        assert!(sgd_step(&theta, &grad, &frozen).unwrap().bitwise_eq(&theta));

        let no_decay = SgdConfig {
            learning_rate: 0.5,
            weight_decay: 0.0,
            ..cfg
        };
        let g = theta.map(|v| v / 0.5);
        assert!(sgd_step(&theta, &g, &no_decay)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    fn blobs() -> Dataset {
        crate::dataset::generate_blobs(120, 2, 3, 0.3, 5).unwrap()
    }

    #[test]
    fn local_train_zero_episodes_is_identity() {
        let m = Mlp::new(spec(2, vec![4], 3, 1)).unwrap();
        let p = m.init_params();
        let cfg = SgdConfig {
            local_episodes: 0,
            ..SgdConfig::default()
        };
        assert!(local_train(&m, &p, &blobs(), &cfg, 3)
            .unwrap()
            .bitwise_eq(&p));
    }

    #[test]
    fn local_train_is_deterministic_and_reduces_loss() {
        let m = Mlp::new(spec(2, vec![8], 3, 1)).unwrap();
        let p = m.init_params();
        let ds = blobs();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            local_episodes: 5,
            ..SgdConfig::default()
        };
        let a = local_train(&m, &p, &ds, &cfg, 42).unwrap();
        let b = local_train(&m, &p, &ds, &cfg, 42).unwrap();
        assert!(a.bitwise_eq(&b));
        let batch = ds.as_batch().unwrap();
        assert!(m.loss(&a, &batch).unwrap() < m.loss(&p, &batch).unwrap());
    }

    #[test]
    fn local_train_rejects_empty_data() {
        let m = Mlp::new(spec(2, vec![4], 3, 1)).unwrap();
        let empty = Dataset::new(Matrix::zeros(0, 2), vec![], 3).unwrap();
        assert!(matches!(
            local_train(&m, &m.init_params(), &empty, &SgdConfig::default(), 0),
            Err(crate::Error::EmptyDataset)
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let s = softmax_rows(&Matrix::new(3, 4, vals).unwrap());
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sgd_is_additive_without_decay(
            t in proptest::collection::vec(-5.0f64..5.0, 6),
            g1 in proptest::collection::vec(-5.0f64..5.0, 6),
            g2 in proptest::collection::vec(-5.0f64..5.0, 6),
            eta in 1e-4f64..1.0,
        ) {
            let cfg = SgdConfig { learning_rate: eta, weight_decay: 0.0, ..SgdConfig::default() };
            let theta = ParamVector::from_flat(t);
            let a = ParamVector::from_flat(g1);
            let b = ParamVector::from_flat(g2);
            let sum = a.zip_map(&b, |x, y| x + y).unwrap();
            let once = sgd_step(&theta, &sum, &cfg).unwrap();
            let twice = sgd_step(&sgd_step(&theta, &a, &cfg).unwrap(), &b, &cfg).unwrap();
            for (x, y) in once.iter().zip(twice.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
