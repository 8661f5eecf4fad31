use std::path::Path;

use dfnas_core::consistency::{average_ranks, permutation_p_value, spearman_rho, Rho};
use dfnas_core::data::export::image_grid_ppm;
use dfnas_core::data::format::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use dfnas_core::data::{LabeledDataset, Labels, Provenance, Split};
use dfnas_core::nas::{ArchDescriptor, SearchSpace};
use dfnas_core::optim::{OptimizerConfig, OptimizerState};
use dfnas_core::tape::{softmax_rows, total_variation};
use dfnas_core::train::{train_classifier, TrainConfig};
use dfnas_core::{Architecture, Model, TargetKind, Tensor};
use proptest::prelude::*;

fn image(shape: [usize; 4]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f32..3.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn nchw() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_map(|(n, c, h, w)| [n, c, h, w])
}

fn soft_rows(n: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(0.0f32..1.0, c), n).prop_map(move |rows| {
        let data = rows
            .iter()
            .flat_map(|r| {
                let s: f32 = r.iter().sum();
                if s > 0.0 {
                    r.iter().map(|v| v / s).collect::<Vec<_>>()
                } else {
                    vec![1.0 / c as f32; c]
                }
            })
            .collect();
        Tensor::new(&[n, c], data).unwrap()
    })
}

fn dataset() -> impl Strategy<Value = LabeledDataset> {
    (1usize..5, 2usize..5, 1usize..6, any::<bool>(), any::<u64>()).prop_flat_map(|(n, c, hw, soft, seed)| {
        let labels = if soft {
            soft_rows(n, c).prop_map(Labels::Soft).boxed()
        } else {
            prop::collection::vec(0..c as u32, n).prop_map(Labels::Hard).boxed()
        };
        (image([n, 3, hw, hw]), labels).prop_map(move |(images, labels)| {
            let provenance = if soft { Provenance::Synthetic } else { Provenance::Real };
            LabeledDataset::new(images, labels, c, Split::Train, provenance, seed).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn tv_is_non_negative_and_quadratic(x in nchw().prop_flat_map(image), c in -4.0f32..4.0) {
        let base = total_variation(&x).unwrap();
        prop_assert!(base >= 0.0);
        let scaled = total_variation(&x.map(|v| v * c)).unwrap();
        prop_assert!((scaled - (c as f64).powi(2) * base).abs() <= 1e-5 * (1.0 + scaled));
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-30.0f32..30.0, 1..40), cols in 1usize..6) {
        let rows = logits.len() / cols;
        prop_assume!(rows > 0);
        let p = softmax_rows(&logits[..rows * cols], cols);
        for r in p.chunks(cols) {
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn average_ranks_sum_to_triangle(xs in prop::collection::vec(0u8..6, 1..20)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let n = xs.len() as f64;
        prop_assert!((average_ranks(&xs).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_is_bounded_symmetric_and_rank_based(pairs in prop::collection::vec((0u8..10, 0u8..10), 2..16)) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let r = spearman_rho(&xs, &ys).unwrap();
        prop_assert_eq!(r, spearman_rho(&ys, &xs).unwrap());
        let squashed: Vec<f64> = xs.iter().map(|v| v.powi(3) + 2.0).collect();
        prop_assert_eq!(r, spearman_rho(&squashed, &ys).unwrap());
        if let Rho::Value(v) = r {
            prop_assert!((-1.0..=1.0).contains(&v));
            let p = permutation_p_value(&xs, &ys, 50, 3).unwrap().unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn dataset_bytes_roundtrip(ds in dataset()) {
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert!(back.images.bit_eq(&ds.images));
    }

    #[test]
    fn corrupting_any_header_byte_is_rejected(ds in dataset(), at in 0usize..4, flip in 1u8..=255) {
        let mut bytes = encode_dataset(&ds);
        bytes[at] ^= flip;
        prop_assert!(decode_dataset(&bytes, Path::new("mem")).is_err());
    }

    #[test]
    fn descriptors_roundtrip_and_enumerate(arch in prop::collection::vec(0usize..3, 4)) {
        let space = SearchSpace::desk(10);
        let d = ArchDescriptor(arch.clone());
        let back: ArchDescriptor = d.to_string().parse().unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert!(space.check(&d).is_ok());
        prop_assert!(space.enumerate().contains(&d));
    }

    #[test]
    fn masked_step_leaves_unmasked_bits(values in prop::collection::vec(-2.0f32..2.0, 1..30), grads in prop::collection::vec(-2.0f32..2.0, 30), mask_bits in prop::collection::vec(any::<bool>(), 30)) {
        let n = values.len();
        let mut v = Tensor::from_vec(values.clone());
        let g = Tensor::from_vec(grads[..n].to_vec());
        let mask = &mask_bits[..n];
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1));
        for _ in 0..3 {
            opt.step_masked(0, &mut v, &g, mask).unwrap();
        }
        for i in 0..n {
            if !mask[i] {
                prop_assert_eq!(v.data()[i].to_bits(), values[i].to_bits());
            }
        }
    }
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let spec = dfnas_core::data::ShapesSpec::default();
    let train = dfnas_core::data::generate_shapes(&spec, 2, 5, Split::Train).unwrap();
    let model = Model::build(&Architecture::registered("student", 10).unwrap(), 5).unwrap();
    let ck = train_classifier(model, &train, None, &TrainConfig::new(1, TargetKind::Hard, 5), "shapes").unwrap();
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back), bytes);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad, Path::new("mem")).is_err());
}

#[test]
fn ppm_header_is_exact() {
    let images = Tensor::zeros(&[4, 3, 5, 6]);
    let ppm = image_grid_ppm(&images, 2, 2).unwrap();
    assert!(ppm.starts_with(b"P6\n12 10\n255\n"));
    assert_eq!(ppm.len(), b"P6\n12 10\n255\n".len() + 12 * 10 * 3);
}
