//! Randomized invariants that hold for any input, not just the fixtures
//! the unit tests pin down.

use proptest::prelude::*;

use vg3s::tape::Tape;
use vg3s::tensor::Tensor;
use vg3s::tokens::{read_token_stack, write_token_stack, TokenStack};
use vg3s::train::lr_at;
use vg3s::voxel::{read_label_grid, write_label_grid, GridSpec, LabelGrid, EMPTY_LABEL};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_stack_roundtrips_bitwise(
        views in 1usize..3,
        layers in 1usize..4,
        ph in 1usize..4,
        pw in 1usize..4,
        channels in 1usize..6,
        seed in any::<u64>(),
    ) {
        let n = views * layers * ph * pw * channels;
        let mut s = seed;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        let stack = TokenStack::new(views, layers, ph, pw, channels, data);
        let mut buf = Vec::new();
        write_token_stack(&mut buf, &stack).unwrap();
        let back = read_token_stack(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.views, stack.views);
        prop_assert_eq!(back.patch_h, stack.patch_h);
        prop_assert_eq!(back.patch_w, stack.patch_w);
        prop_assert!(back.data().iter().zip(stack.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn label_grid_roundtrips(
        dims in (1usize..6, 1usize..6, 1usize..4),
        classes in 1usize..6,
        seed in any::<u64>(),
    ) {
        let spec = GridSpec::new([dims.0, dims.1, dims.2], [-1.0, 0.5, 2.0], 0.25);
        let mut grid = LabelGrid::empty(spec, classes);
        let mut s = seed;
        for l in grid.labels.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = (s >> 33) as usize % (classes + 2);
            *l = if v >= classes { EMPTY_LABEL } else { v as u8 };
        }
        let mut buf = Vec::new();
        write_label_grid(&mut buf, &grid).unwrap();
        let back = read_label_grid(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.labels, grid.labels);
        prop_assert_eq!(back.classes, grid.classes);
    }

    #[test]
    fn splat_rows_form_a_distribution(
        count in 1usize..12,
        seed in any::<u64>(),
    ) {
        let grid = GridSpec::new([5, 4, 3], [-1.0, -1.0, -0.5], 0.5);
        let mut s = seed;
        let mut next = |lo: f64, hi: f64| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            lo + ((s >> 11) as f64 / (1u64 << 53) as f64) * (hi - lo)
        };
        let classes = 3;
        let positions: Vec<f64> = (0..count * 3).map(|_| next(-1.5, 1.5)).collect();
        let scales: Vec<f64> = (0..count * 3).map(|_| next(0.05, 0.8)).collect();
        let rotations: Vec<f64> = (0..count * 4).map(|_| next(-1.0, 1.0)).collect();
        let opacity: Vec<f64> = (0..count).map(|_| next(-3.0, 3.0)).collect();
        let logits: Vec<f64> = (0..count * classes).map(|_| next(-4.0, 4.0)).collect();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![count, 3], positions));
        let sc = tape.constant(Tensor::new(vec![count, 3], scales));
        let rotations: Vec<f64> = rotations
            .chunks(4)
            .flat_map(|q| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                q.iter().map(move |v| v / n).collect::<Vec<_>>()
            })
            .collect();
        let r = tape.constant(Tensor::new(vec![count, 4], rotations));
        let o = tape.constant(Tensor::new(vec![count], opacity));
        let cl = tape.constant(Tensor::new(vec![count, classes], logits));
        let pred = tape.splat_distribution(p, sc, r, o, cl, &grid, 3.0);
        let t = tape.value(pred);
        for v in 0..grid.num_voxels() {
            let mut total = 0.0;
            for c in 0..=classes {
                let x = t.at2(v, c);
                prop_assert!((0.0..=1.0).contains(&x));
                total += x;
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_stays_in_envelope(
        steps in 2usize..500,
        warm_frac in 0.0f64..0.9,
        peak in 1e-6f64..1.0,
    ) {
        let warmup = ((steps as f64) * warm_frac) as usize;
        let mut prev = 0.0;
        for step in 0..steps {
            let lr = lr_at(step, steps, warmup, peak);
            prop_assert!(lr >= 0.0 && lr <= peak + 1e-15);
            if step < warmup {
                prop_assert!(lr >= prev);
            }
            prev = lr;
        }
        if warmup > 0 {
            prop_assert!(lr_at(0, steps, warmup, peak) == 0.0);
        }
    }
}
