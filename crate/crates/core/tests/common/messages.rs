//! Proptest generators for wire messages.

use proptest::prelude::*;
use sfl_core::models::ModelName;
use sfl_core::protocol::{Body, SessionParams, WireMessage, MAGIC};
use sfl_core::Tensor;

pub fn tensor(values: impl Strategy<Value = f32> + Clone + 'static) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..=3).prop_flat_map(move |shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(values.clone(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

pub fn any_tensor() -> impl Strategy<Value = Tensor> {
    tensor(prop::num::f32::ANY)
}

pub fn model_name() -> impl Strategy<Value = ModelName> {
    prop::sample::select(ModelName::ALL.to_vec())
}

pub fn body() -> impl Strategy<Value = Body> {
    prop_oneof![
        any::<u32>().prop_map(|num_samples| Body::Hello { num_samples }),
        (model_name(), any::<u32>(), any::<f32>(), any::<f32>(), any::<u64>(), any::<bool>(), any::<u32>()).prop_map(
            |(model, epochs, learning_rate, momentum, seed, aggregate, steps_per_epoch)| {
                Body::TrainConfig(SessionParams {
                    model,
                    epochs,
                    learning_rate,
                    momentum,
                    seed,
                    aggregate,
                    steps_per_epoch,
                })
            }
        ),
        prop::collection::vec(any_tensor(), 0..4).prop_map(Body::ModelPush),
        (any::<u8>(), any_tensor()).prop_map(|(label, tensor)| Body::Activation { label, tensor }),
        any_tensor().prop_map(Body::Gradient),
        prop::collection::vec(any_tensor(), 0..4).prop_map(Body::ModelUpload),
        any::<f32>().prop_map(|val_accuracy| Body::RoundDone { val_accuracy }),
        Just(Body::Bye),
    ]
}

pub fn message() -> impl Strategy<Value = WireMessage> {
    (any::<u32>(), any::<u16>(), body()).prop_map(|(round, client, body)| WireMessage::new(round, client, body))
}

pub fn no_nan(body: &Body) -> bool {
    let tensor_ok = |t: &Tensor| t.data().iter().all(|v| !v.is_nan());
    match body {
        Body::TrainConfig(p) => !p.learning_rate.is_nan() && !p.momentum.is_nan(),
        Body::ModelPush(ts) | Body::ModelUpload(ts) => ts.iter().all(tensor_ok),
        Body::Activation { tensor, .. } | Body::Gradient(tensor) => tensor_ok(tensor),
        Body::RoundDone { val_accuracy } => !val_accuracy.is_nan(),
        Body::Hello { .. } | Body::Bye => true,
    }
}

/// A frame with a valid header and CRC around an arbitrary payload.
pub fn framed(tag: u8, payload: &[u8]) -> Vec<u8> {
    let mut frame = MAGIC.to_vec();
    frame.push(tag);
    frame.extend_from_slice(&7u32.to_le_bytes());
    frame.extend_from_slice(&3u16.to_le_bytes());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(payload);
    let crc = crc32fast::hash(&frame);
    frame.extend_from_slice(&crc.to_le_bytes());
    frame
}
