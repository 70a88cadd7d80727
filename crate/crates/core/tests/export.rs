//! Merging, int8 quantization and the checkpoint / quantized file formats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfl_core::data::{synth_dataset, Difficulty};
use sfl_core::export::{
    merge, quantize_int8, quantized_infer, Checkpoint, ConfigSnapshot, ExportError, MetricsSummary, QuantizedModel,
    QuantizedTensor,
};
use sfl_core::models::{self, Classifier, ModelName, ModelSpec};
use sfl_core::nn::{Layer, LayerKind};
use sfl_core::orchestrator::{evaluate, prepare_shards, sfl_train, Scheme, TrainingConfig};
use sfl_core::Tensor;

fn random_features(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![50, 13], (0..650).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn checkpoint(model: ModelSpec) -> Checkpoint {
    let cfg = TrainingConfig::new(model.name);
    Checkpoint::new(
        model,
        ConfigSnapshot::new(Scheme::Sfl, &cfg),
        MetricsSummary {
            val_accuracy: None,
            final_loss: 1.5,
            steps: 3,
        },
    )
}

#[test]
fn merged_model_matches_split_execution_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in ModelName::ALL {
        let full = models::build_initialized(name, 21);
        let split = full.split();
        let merged = merge(&split).unwrap();
        assert_eq!(merged, full);
        let inputs = if name.is_cnn() { 10 } else { 100 };
        for _ in 0..inputs {
            let x = random_features(&mut rng);
            assert!(merged.logits(&x).unwrap().bit_eq(&split.logits(&x).unwrap()));
        }
    }
}

#[test]
fn merge_rejects_mismatched_halves() {
    let mut split = models::build(ModelName::Model2Cnn).split();
    split.server = models::build(ModelName::Model1Mlp).split().server;
    assert!(matches!(merge(&split), Err(ExportError::Model(_))));
}

/// Bytes of a rank-`r` f32 tensor record: rank byte, dims, values.
fn tensor_record(shape: &[usize]) -> usize {
    1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

#[test]
fn model1_file_sizes_follow_the_layout() {
    let model = models::build_initialized(ModelName::Model1Mlp, 0);
    let name_len = "model1_mlp".len();
    let prefix = 4 + 2 + 1 + name_len;

    let tensors: usize = [vec![25, 650], vec![25], vec![7, 25], vec![7]].iter().map(|s| tensor_record(s)).sum();
    let config = 1 + 4 + 4 + 4 + 8 + 4 + 1 + 8;
    let summary = 1 + 4 + 4 + 8;
    let sflc = prefix + 1 + 4 + tensors + config + summary + 4;
    assert_eq!(sflc, 65_933);
    assert_eq!(checkpoint(model.clone()).to_bytes().len(), sflc);

    let quant_tensor = |n: usize| 4 + 1 + 4 + n;
    let fc = |i: usize, o: usize| 1 + 8 + quant_tensor(i * o) + quant_tensor(o);
    let sflq = prefix + 2 + fc(650, 25) + 1 + fc(25, 7) + 4;
    assert_eq!(sflq, 16_535);
    assert_eq!(quantize_int8(&model).unwrap().to_bytes().len(), sflq);
}

#[test]
fn saved_files_load_back_and_reject_any_flipped_byte() {
    let dir = tempfile::tempdir().unwrap();
    let model = models::build_initialized(ModelName::Model1Mlp, 4);
    let ck = checkpoint(model.clone());
    let q = quantize_int8(&model).unwrap();
    let (ck_path, q_path) = (dir.path().join("m.sflc"), dir.path().join("m.sflq"));
    ck.save(&ck_path).unwrap();
    q.save(&q_path).unwrap();
    assert_eq!(Checkpoint::load(&ck_path).unwrap(), ck);
    assert_eq!(QuantizedModel::load(&q_path).unwrap(), q);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ck_bytes = std::fs::read(&ck_path).unwrap();
    let q_bytes = std::fs::read(&q_path).unwrap();
    for _ in 0..200 {
        let mut bad = ck_bytes.clone();
        let i = rng.random_range(4..bad.len());
        bad[i] ^= 1 << rng.random_range(0..8);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(ExportError::Crc { .. })), "byte {i}");
        let mut bad = q_bytes.clone();
        let i = rng.random_range(4..bad.len());
        bad[i] ^= 1 << rng.random_range(0..8);
        assert!(matches!(QuantizedModel::from_bytes(&bad), Err(ExportError::Crc { .. })), "byte {i}");
    }
    assert!(matches!(Checkpoint::load(dir.path().join("missing")), Err(ExportError::Io { .. })));
}

#[test]
fn quantized_inference_is_deterministic_across_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sflq");
    quantize_int8(&models::build_initialized(ModelName::Model2Cnn, 8)).unwrap().save(&path).unwrap();
    let (a, b) = (QuantizedModel::load(&path).unwrap(), QuantizedModel::load(&path).unwrap());
    let x = random_features(&mut ChaCha8Rng::seed_from_u64(3));
    assert!(quantized_infer(&a, &x).unwrap().bit_eq(&quantized_infer(&b, &x).unwrap()));
    assert!(quantized_infer(&a, &Tensor::zeros(&[49, 13])).is_err());
}

#[test]
fn quantized_model_keeps_layer_order_and_dims() {
    for name in ModelName::ALL {
        let model = models::build_initialized(name, 1);
        let q = quantize_int8(&model).unwrap();
        let kinds: Vec<LayerKind> = q.layers.iter().map(|l| l.kind).collect();
        assert_eq!(kinds, model.layers.iter().map(Layer::kind).collect::<Vec<_>>());
        let back = q.dequantized().unwrap();
        assert_eq!(back.split_index, model.split_index);
    }
}

#[test]
fn quantization_rejects_non_finite_weights() {
    let mut model = models::build_initialized(ModelName::Model1Mlp, 0);
    model.layers[0].params_mut().0.data_mut()[3] = f32::INFINITY;
    assert!(matches!(quantize_int8(&model), Err(ExportError::NonFinite)));
}

/// For one FC layer, each dequantized output differs from the float output
/// by at most `sum_i |x_i| * s_w / 2 + s_b / 2`, plus float rounding.
#[test]
fn single_layer_logit_error_within_interval_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kind = LayerKind::FullyConnected {
        inputs: 650,
        outputs: 7,
    };
    for _ in 0..20 {
        let w = Tensor::new(vec![7, 650], (0..4550).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap();
        let b = Tensor::new(vec![7], (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (qw, qb) = (QuantizedTensor::quantize(&w).unwrap(), QuantizedTensor::quantize(&b).unwrap());
        let float = Layer::with_params(kind, w, b).unwrap();
        let quant = Layer::with_params(kind, qw.dequantize(), qb.dequantize()).unwrap();
        let x = Tensor::from_vec((0..650).map(|_| rng.random_range(-3.0..3.0)).collect());
        let (yf, yq) = (float.infer(&x).unwrap(), quant.infer(&x).unwrap());
        let l1: f64 = x.data().iter().map(|v| f64::from(v.abs())).sum();
        let bound = l1 * f64::from(qw.scale) / 2.0 + f64::from(qb.scale) / 2.0;
        // Two f32 dot products of 650 terms with magnitudes up to |x|*|w|.
        let rounding = 2.0 * 650.0 * f64::from(f32::EPSILON) * l1 * 0.2;
        for (a, b) in yf.data().iter().zip(yq.data()) {
            let err = f64::from((a - b).abs());
            assert!(err <= bound + rounding, "error {err} exceeds bound {bound}");
        }
    }
}

#[test]
fn quantized_mlp_tracks_float_accuracy_on_easy_data() {
    let ds = synth_dataset(7, 50, Difficulty::Easy);
    let mut cfg = TrainingConfig::new(ModelName::Model1Mlp);
    cfg.num_clients = 3;
    cfg.seed = 7;
    let (shards, val) = prepare_shards(&ds, 3, cfg.val_fraction, cfg.seed).unwrap();
    let merged = merge(&sfl_train(&cfg, &shards, &val).unwrap().model).unwrap();
    let q = quantize_int8(&merged).unwrap();
    let float_acc = evaluate(&merged, &val).unwrap();
    let quant_acc = evaluate(&q.dequantized().unwrap(), &val).unwrap();
    let agree = val
        .samples()
        .iter()
        .filter(|s| {
            merged.logits(&s.features).unwrap().argmax() == quantized_infer(&q, &s.features).unwrap().argmax()
        })
        .count() as f64
        / val.len() as f64;
    println!("float {float_acc:.3}, int8 {quant_acc:.3}, argmax agreement {agree:.3}");
    assert!((float_acc - quant_acc).abs() <= 0.02);
    assert!(agree >= 0.98);
}
