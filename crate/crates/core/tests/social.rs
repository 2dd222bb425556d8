mod common;

use rand::Rng;
use trajcast::numerics::{dilated_conv2d, leaky_relu, ParamStore, Tensor};
use trajcast::preprocess::VehicleState;
use trajcast::social::*;

fn at(x: f64, y: f64, lane: f64) -> VehicleState {
    VehicleState::from_array([x, y, 0.0, 0.0, 0.0, 0.0, 6.0, 15.0, 2.0, lane])
}

/// Pooling recomputed from the stored tensors with the reference convolution
/// and a direct matrix-vector product.
fn pool_oracle(grid: &Tensor, spec: &PoolSpec, store: &ParamStore, p: &PoolParams) -> Vec<f64> {
    let mut x = grid.clone();
    for (l, &(k, b)) in spec.layers.iter().zip(&p.convs) {
        let mut y = common::conv_oracle(&x, store.get(k), l.dilation);
        let cout = l.out_channels;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let z = *v + store.get(b).data()[i % cout];
            *v = if z > 0.0 { z } else { spec.leaky_alpha * z };
        }
        x = y;
    }
    let (w, b) = (store.get(p.proj_w), store.get(p.proj_b));
    let n = x.len();
    (0..spec.output_dim)
        .map(|o| b.data()[o] + (0..n).map(|j| w.data()[o * n + j] * x.data()[j]).sum::<f64>())
        .collect()
}

#[test]
fn pooling_matches_reference() {
    let grid = GridSpec::default();
    let spec = PoolSpec::default();
    let mut rng = common::rng(17);
    let mut store = ParamStore::new();
    let p = spec.init(&mut store, 64, &grid, &mut rng).unwrap();
    for case in 0..4 {
        let mut t = common::random_tensor(&mut rng, &[grid.rows, grid.cols, 64], 1.0);
        if case == 0 {
            // sparse occupancy like a real scene
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if (i / 64) % 3 != 0 {
                    *v = 0.0;
                }
            }
        }
        let got = social_pool(&t, &spec, &store, &p).unwrap();
        assert_eq!(got.shape(), &[spec.output_dim]);
        for (a, b) in got.data().iter().zip(pool_oracle(&t, &spec, &store, &p)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    let flat: usize = store.get(p.proj_w).shape()[1];
    assert_eq!(flat, 9 * 5 * 8);
}

#[test]
fn zero_grid_with_zero_biases_gives_projection_bias() {
    let grid = GridSpec::default();
    let spec = PoolSpec::default();
    let mut store = ParamStore::new();
    let p = spec.init(&mut store, 64, &grid, &mut common::rng(1)).unwrap();
    for &(_, b) in &p.convs {
        store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = social_pool(&Tensor::zeros(&[9, 5, 64]), &spec, &store, &p).unwrap();
    assert_eq!(out.data(), store.get(p.proj_b).data());
}

#[test]
fn receptive_field_of_the_stack() {
    // dilations 1, 2, 2 with 3×3 kernels reach 1 + 2 + 2 = 5 cells each way
    let mut rng = common::rng(4);
    let spec = PoolSpec::default();
    let kernels: Vec<Tensor> = {
        let mut cin = 3;
        spec.layers
            .iter()
            .map(|l| {
                let n = 9 * cin * l.out_channels;
                let k = Tensor::new(&[3, 3, cin, l.out_channels], (0..n).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
                cin = l.out_channels;
                k
            })
            .collect()
    };
    let run = |x: &Tensor| {
        let mut x = x.clone();
        for (l, k) in spec.layers.iter().zip(&kernels) {
            x = leaky_relu(&dilated_conv2d(&x, k, l.dilation).unwrap(), spec.leaky_alpha);
        }
        x
    };
    let (rows, cols) = (15usize, 15usize);
    let base = Tensor::zeros(&[rows, cols, 3]);
    let out0 = run(&base);
    for (sr, sc) in [(7usize, 7usize), (0, 0), (3, 12)] {
        let mut hit = base.clone();
        hit.data_mut()[(sr * cols + sc) * 3 + 1] = 1.0;
        let out = run(&hit);
        for r in 0..rows {
            for c in 0..cols {
                let moved = (0..8).any(|o| out.data()[(r * cols + c) * 8 + o] != out0.data()[(r * cols + c) * 8 + o]);
                let reach = r.abs_diff(sr).max(c.abs_diff(sc)) <= 5;
                assert_eq!(moved, reach, "source ({sr},{sc}) output ({r},{c})");
            }
        }
    }
}

#[test]
fn scatter_places_encodings_by_cell() {
    let grid = GridSpec::default();
    let now = [at(6.0, 0.0, 3.0), at(18.0, 30.0, 4.0), at(-6.0, -14.0, 2.0), at(6.0, 200.0, 3.0)];
    let a = grid.resolve_cells(&now);
    assert_eq!(a.cells, vec![Some(grid.flat(4, 2)), Some(grid.flat(6, 3)), Some(grid.flat(3, 1)), None]);
    let enc = Tensor::new(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let t = build_social_tensor(&enc, &a, &grid).unwrap();
    assert_eq!(t.shape(), &[9, 5, 2]);
    let cell = |r: usize, c: usize| t.data()[grid.flat(r, c) * 2..grid.flat(r, c) * 2 + 2].to_vec();
    assert_eq!(cell(4, 2), vec![1.0, 2.0]);
    assert_eq!(cell(6, 3), vec![3.0, 4.0]);
    assert_eq!(cell(3, 1), vec![5.0, 6.0]);
    assert_eq!(t.data().iter().filter(|v| **v != 0.0).count(), 6);
    assert!(build_social_tensor(&enc, &grid.resolve_cells(&now[..2]), &grid).is_err());
}

#[test]
fn nearest_vehicle_keeps_a_shared_cell() {
    let grid = GridSpec::default();
    // both neighbors round to row 6 in the ego lane; one more sits on the ego
    let now = [at(6.0, 0.0, 3.0), at(6.0, 36.0, 3.0), at(6.0, 25.0, 3.0), at(6.0, 1.0, 3.0)];
    let a = grid.resolve_cells(&now);
    assert_eq!(a.collisions, 2);
    assert_eq!(a.cells, vec![Some(grid.flat(4, 2)), None, Some(grid.flat(6, 2)), None]);
}
