//! Conformer + BiLSTM multi-task classifier.
//!
//! `features → conv subsampling → positional encoding → Conformer blocks →
//! LSTM layers → projection → pooling → one head per task`.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{
    count_parameters, parameter_breakdown, subsampled_len, HeadMode, ModelConfig, Pooling, MIN_FRAMES,
};
pub use model::{sinusoidal_positions, Model, Session, TaskLogits};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Tag;
    use crate::frontend::{AugmentPolicy, FeatureMatrix};
    use crate::numerics::Array;
    use crate::Error;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            d_model: 16,
            attention_heads: 2,
            ff_expansion: 2,
            conv_kernel: 3,
            subsample_channels: 4,
            lstm_layers: 1,
            lstm_hidden: 8,
            proj_dim: 8,
            num_mel_bins: 16,
            spec_augment: AugmentPolicy::disabled(),
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, bins: usize, seed: u64) -> FeatureMatrix {
        let data = (0..t * bins)
            .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 100.0 - 5.0)
            .collect();
        FeatureMatrix::new(data, t, bins).unwrap()
    }

    #[test]
    fn subsampled_lengths() {
        assert_eq!(subsampled_len(98), 23);
        assert_eq!(subsampled_len(7), 1);
        assert_eq!(subsampled_len(6), 0);
    }

    #[test]
    fn conv_subsample_shape_and_minimum() {
        let model = Model::<f64>::new(tiny(), 1).unwrap();
        let mut s = Session::new(&model, false, 0);
        let x = s.features(&features(98, 16, 0)).unwrap();
        let y = s.conv_subsample(x).unwrap();
        assert_eq!(s.graph().shape(y), &[23, 16]);

        let mut s = Session::new(&model, false, 0);
        let x = s.features(&features(6, 16, 0)).unwrap();
        match s.conv_subsample(x) {
            Err(Error::Shape { detail, .. }) => assert!(detail.contains('7'), "{detail}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn five_by_two_logits() {
        let cfg = ModelConfig {
            num_blocks: 2,
            d_model: 64,
            attention_heads: 2,
            lstm_hidden: 32,
            subsample_channels: 8,
            num_mel_bins: 80,
            ..tiny()
        };
        let model = Model::<f32>::new(cfg, 3).unwrap();
        let out = model.forward(&features(98, 80, 1), false, 0).unwrap();
        assert_eq!(out.shape(), [5, 2]);
    }

    #[test]
    fn eval_is_deterministic_and_training_is_not() {
        let cfg = ModelConfig { dropout_p: 0.3, ..tiny() };
        let model = Model::<f32>::new(cfg, 4).unwrap();
        let f = features(40, 16, 2);
        let a = model.forward(&f, false, 1).unwrap();
        let b = model.forward(&f, false, 2).unwrap();
        assert_eq!(a, b);
        let c = model.forward(&f, true, 1).unwrap();
        let d = model.forward(&f, true, 1).unwrap();
        let e = model.forward(&f, true, 2).unwrap();
        assert_eq!(c, d);
        assert_ne!(c, e);
    }

    #[test]
    fn degenerate_config_is_well_formed() {
        let cfg = ModelConfig {
            num_blocks: 0,
            lstm_layers: 0,
            ..tiny()
        };
        let model = Model::<f32>::new(cfg, 5).unwrap();
        let out = model.forward(&features(12, 16, 3), false, 0).unwrap();
        assert_eq!(out.shape(), [5, 2]);
    }

    #[test]
    fn parameter_counts() {
        let cfg = ModelConfig::default();
        let heads: usize = cfg
            .param_specs()
            .iter()
            .filter(|(n, _)| n.starts_with("heads."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(heads, 1290);

        let lstm = ModelConfig {
            num_blocks: 0,
            d_model: 2,
            attention_heads: 1,
            lstm_layers: 1,
            lstm_hidden: 3,
            bidirectional: false,
            ..ModelConfig::default()
        };
        let per_dir: usize = lstm
            .param_specs()
            .iter()
            .filter(|(n, _)| n.starts_with("lstm."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(per_dir, 72);

        let base = count_parameters(&ModelConfig { num_blocks: 3, ..tiny() });
        let more = count_parameters(&ModelConfig { num_blocks: 6, ..tiny() });
        let one = count_parameters(&ModelConfig { num_blocks: 1, ..tiny() })
            - count_parameters(&ModelConfig { num_blocks: 0, ..tiny() });
        assert_eq!(more - base, 3 * one);
        let total: usize = parameter_breakdown(&tiny()).iter().map(|(_, n)| n).sum();
        assert_eq!(total, count_parameters(&tiny()));
    }

    #[test]
    fn head_count_follows_task_subset() {
        for tasks in [
            Tag::ALL.to_vec(),
            vec![Tag::Prolongation, Tag::WordRepetition, Tag::Interjection],
            vec![Tag::Block],
        ] {
            let cfg = ModelConfig {
                task_subset: tasks.clone(),
                ..tiny()
            };
            let model = Model::<f32>::new(cfg, 0).unwrap();
            let out = model.forward(&features(20, 16, 0), false, 0).unwrap();
            assert_eq!(out.num_tasks(), tasks.len());
            assert_eq!(out.tasks, tasks);
        }
    }

    #[test]
    fn zeroed_sublayers_reduce_block_to_layer_norm() {
        let mut model = Model::<f64>::new(tiny(), 7).unwrap();
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let zero = ["ffn1.w2", "ffn2.w2", "mhsa.wo", "conv.pw2.weight"]
                .iter()
                .any(|s| name.ends_with(s));
            if zero {
                model.params.value_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut s = Session::new(&model, false, 0);
        let data: Vec<f64> = (0..5 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = s.input(Array::new(vec![5, 16], data.clone()).unwrap());
        let y = s.conformer_block(x, 0).unwrap();
        let got = s.graph().value(y).data().to_vec();
        for r in 0..5 {
            let row = &data[r * 16..(r + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for j in 0..16 {
                let want = (row[j] - mean) / (var + 1e-5).sqrt();
                assert!((got[r * 16 + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_single_frame_is_identity() {
        let model = Model::<f64>::new(ModelConfig { d_model: 8, ..tiny() }, 2).unwrap();
        let mut s = Session::new(&model, false, 0);
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 1.3).cos()).collect();
        let x = s.input(Array::new(vec![4, 8], data).unwrap());
        let (_, weights) = s.multi_head_attention(x, "blocks.0.mhsa").unwrap();
        assert_eq!(weights.len(), 2);
        for w in weights {
            for r in 0..4 {
                let total: f64 = s.graph().value(w).row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
        let x1 = s.input(Array::new(vec![1, 8], vec![0.5; 8]).unwrap());
        let (_, weights) = s.multi_head_attention(x1, "blocks.0.mhsa").unwrap();
        assert_eq!(s.graph().value(weights[0]).data(), &[1.0]);
    }

    #[test]
    fn pooling_and_affine_heads() {
        let mut model = Model::<f64>::new(ModelConfig { proj_dim: 4, ..tiny() }, 0).unwrap();
        model.params.get_mut("heads.b.weight").unwrap().data_mut().fill(0.0);
        model
            .params
            .get_mut("heads.b.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.2, 0.9]);
        let mut s = Session::new(&model, false, 0);
        let x = s.input(Array::new(vec![3, 4], [1.0, 2.0, 3.0, 4.0].repeat(3)).unwrap());
        let logits = s.pool_and_classify(x).unwrap();
        let v = s.graph().value(logits);
        assert_eq!(v.row(1), &[0.2, 0.9]);

        let mut s = Session::new(&model, false, 0);
        let single = s.input(Array::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let one = s.pool_and_classify(single).unwrap();
        assert_eq!(s.graph().value(one).data(), v.data());

        let mut s = Session::new(&model, false, 0);
        let empty = s.input(Array::zeros(&[0, 4]));
        assert!(matches!(s.pool_and_classify(empty), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = Model::<f32>::new(tiny(), 9).unwrap();
        let f = features(30, 16, 4);
        let before = model.forward(&f, false, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = Checkpoint::new(model.clone());
        ckpt.epoch = 3;
        ckpt.best_dev_f1 = 0.5;
        ckpt.adam = Some(crate::numerics::AdamState::new(&model.params, Default::default()));
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let after = loaded.model.forward(&f, false, 0).unwrap();
        assert_eq!(
            before.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_errors() {
        let model = Model::<f32>::new(ModelConfig { num_blocks: 3, ..tiny() }, 9).unwrap();
        let bytes = Checkpoint::new(model).to_bytes().unwrap();

        for cut in [2, 10, bytes.len() - 3] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Parse(_))));
        }
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n3.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        let smaller = ModelConfig { num_blocks: 1, ..tiny() };
        assert!(matches!(Checkpoint::load_into(&path, &smaller), Err(Error::Shape { .. })));
        assert!(Checkpoint::load_into(&path, &ModelConfig { num_blocks: 3, ..tiny() }).is_ok());
    }

    #[test]
    fn init_from_copies_matching_parameters() {
        let src = Model::<f32>::new(ModelConfig { num_blocks: 2, ..tiny() }, 1).unwrap();
        let mut dst = Model::<f32>::new(
            ModelConfig {
                num_blocks: 1,
                task_subset: vec![Tag::Block],
                ..tiny()
            },
            2,
        )
        .unwrap();
        let copied = dst.init_from(&src.params);
        assert_eq!(copied, dst.params.len());
        assert_eq!(dst.params.get("blocks.0.mhsa.wq"), src.params.get("blocks.0.mhsa.wq"));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-12);
        assert!((pe[6] - (1.0 / 100.0f64).sin()).abs() < 1e-12);
    }
}
