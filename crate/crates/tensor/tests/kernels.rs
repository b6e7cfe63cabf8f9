use learnlock_tensor::{exec, kernels, ConvGeometry};
use proptest::prelude::*;

fn naive(m: usize, k: usize, n: usize, a: &[f32], at: bool, b: &[f32], bt: bool) -> Vec<f64> {
    let ai = |i: usize, p: usize| if at { a[p * m + i] } else { a[i * k + p] } as f64;
    let bi = |p: usize, j: usize| if bt { b[j * k + p] } else { b[p * n + j] } as f64;
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| ai(i, p) * bi(p, j)).sum();
        }
    }
    c
}

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, len)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gemm_matches_naive(
        (m, k, n) in (1usize..9, 1usize..9, 1usize..9),
        at in any::<bool>(),
        bt in any::<bool>(),
        seed in vec_of(200),
    ) {
        let a = &seed[..m * k];
        let b = &seed[100..100 + k * n];
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, a, at, b, bt, 0.0, &mut c);
        for (got, want) in c.iter().zip(naive(m, k, n, a, at, b, bt)) {
            prop_assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint(
        (ic, oc, k, stride, pad) in (1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2),
        hw in 4usize..7,
        data in vec_of(216 + 81 + 384),
    ) {
        let geom = ConvGeometry::new([ic, hw, hw], [oc, ic, k, k], stride, pad).unwrap();
        // Largest cases: x 2*3*6*6 = 216, w 3*3*3*3 = 81, y 2*3*8*8 = 384.
        let batch = 2;
        let x = &data[..batch * geom.in_len()];
        let w = &data[216..216 + geom.weight_len()];
        let y = &data[297..297 + batch * geom.out_len()];
        let mut ax = vec![0.0; batch * geom.out_len()];
        kernels::conv2d_forward(&geom, x, w, None, &mut ax);
        let mut aty = vec![0.0; batch * geom.in_len()];
        kernels::conv2d_backward_input(&geom, y, w, &mut aty);
        let (l, r) = (dot(&ax, y), dot(x, &aty));
        prop_assert!((l - r).abs() <= 1e-4 * (1.0 + l.abs()), "{} vs {}", l, r);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise(data in vec_of(4 * 3 * 8 * 8 + 4 * 3 * 9)) {
        let geom = ConvGeometry::new([3, 8, 8], [4, 3, 3, 3], 1, 1).unwrap();
        let batch = 4;
        let x = &data[..batch * geom.in_len()];
        let w = &data[batch * geom.in_len()..];
        let run = |seq| {
            exec::set_sequential(seq);
            let mut out = vec![0.0; batch * geom.out_len()];
            kernels::conv2d_forward(&geom, x, w, None, &mut out);
            let mut gw = vec![0.0; geom.weight_len()];
            kernels::conv2d_backward_params(&geom, x, &out, batch, &mut gw, None);
            exec::set_sequential(false);
            (out, gw)
        };
        prop_assert_eq!(run(true), run(false));
    }
}
