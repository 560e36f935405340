use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaekit::autodiff::finite_diff_check;
use vaekit::networks::{Architecture, ArchitectureSpec, VaeModel};
use vaekit::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn specs() -> Vec<ArchitectureSpec> {
    vec![
        ArchitectureSpec::mlp(vec![1, 8, 8], 4),
        ArchitectureSpec::conv(vec![1, 8, 8], 4),
        ArchitectureSpec::mlp(vec![2], 2),
    ]
}

#[test]
fn mlp_parameter_count_matches_layer_sizes() {
    let model = VaeModel::init(ArchitectureSpec::mlp(vec![1, 16, 16], 8), 0).unwrap();
    let enc = (256 * 128 + 128) + (128 * 64 + 64) + (64 * 16 + 16);
    let dec = (8 * 64 + 64) + (64 * 128 + 128) + (128 * 256 + 256);
    assert_eq!(model.param_count(), enc + dec);
}

#[test]
fn encoding_is_row_independent() {
    for spec in specs() {
        let model = VaeModel::init(spec.clone(), 3).unwrap();
        let mut shape = vec![6];
        shape.extend(&spec.input_shape);
        let x = random(&shape, 1);
        let (mu, lv) = model.encode_tensor(&x).unwrap();
        let d = spec.latent_dim;
        for i in 0..6 {
            let (mu1, lv1) = model.encode_tensor(&x.slice_rows(i, 1).unwrap()).unwrap();
            for k in 0..d {
                assert!((mu1.data()[k] - mu.data()[i * d + k]).abs() < 1e-10);
                assert!((lv1.data()[k] - lv.data()[i * d + k]).abs() < 1e-10);
            }
        }
        let order = [5, 3, 0, 1, 4, 2];
        let (mu_p, _) = model.encode_tensor(&x.select_rows(&order).unwrap()).unwrap();
        for (row, &src) in order.iter().enumerate() {
            for k in 0..d {
                assert!((mu_p.data()[row * d + k] - mu.data()[src * d + k]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn decoder_restores_input_shape() {
    for spec in specs() {
        let model = VaeModel::init(spec.clone(), 4).unwrap();
        let z = random(&[3, spec.latent_dim], 2);
        let x_hat = model.decode_tensor(&z).unwrap();
        let mut shape = vec![3];
        shape.extend(&spec.input_shape);
        assert_eq!(x_hat.shape(), shape.as_slice());
    }
}

#[test]
fn initialization_is_seeded() {
    let spec = ArchitectureSpec::conv(vec![1, 8, 8], 2);
    let a = VaeModel::init(spec.clone(), 7).unwrap();
    let b = VaeModel::init(spec.clone(), 7).unwrap();
    let c = VaeModel::init(spec, 8).unwrap();
    assert!(a.params().zip(b.params()).all(|(p, q)| p == q));
    assert!(a.params().zip(c.params()).any(|(p, q)| p != q));
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let spec = ArchitectureSpec::mlp(vec![6], 3);
    let model = VaeModel::init(spec, 9).unwrap();
    let x = random(&[4, 6], 3);
    let first = model.encoder_params()[0].1.clone();
    let check = finite_diff_check(
        |g, w| {
            let mut vars = model.bind(g, false).vars().to_vec();
            vars[0] = w;
            let params = model.bind_vars(g, vars)?;
            let xv = g.constant(x.clone());
            let latent = model.encode(g, &params, xv)?;
            Ok(g.sum(latent.mu))
        },
        &first,
        1e-6,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
}

#[test]
fn invalid_architectures_are_rejected() {
    let odd = ArchitectureSpec {
        input_shape: vec![1, 6, 6],
        latent_dim: 2,
        arch: Architecture::Conv2d { channels: vec![4, 4], kernel: 3, stride: 2 },
    };
    assert!(VaeModel::init(odd, 0).is_err());
    let even_kernel = ArchitectureSpec {
        input_shape: vec![1, 8, 8],
        latent_dim: 2,
        arch: Architecture::Conv2d { channels: vec![4], kernel: 2, stride: 2 },
    };
    assert!(VaeModel::init(even_kernel, 0).is_err());
    assert!(VaeModel::init(ArchitectureSpec::mlp(vec![4], 0), 0).is_err());
    assert!(VaeModel::init(ArchitectureSpec::conv(vec![8, 8], 2), 0).is_err());
}

#[test]
fn encode_rejects_wrong_input_width() {
    let model = VaeModel::init(ArchitectureSpec::mlp(vec![4], 2), 0).unwrap();
    assert!(model.encode_tensor(&Tensor::zeros(&[2, 5])).is_err());
    assert!(model.decode_tensor(&Tensor::zeros(&[2, 3])).is_err());
}
