//! Per-tensor affine int8 quantization.
//!
//! A tensor is stored as codes `q` with one `scale` and `zero_point`, and
//! reads back as `scale * (q - zero_point)`. The representable range is
//! widened to contain zero, so zero is always exact, and the scale is the
//! smallest `f32` not below `(max - min) / 255`. Every weight then lies
//! within `scale / 2` of its dequantized value.

use super::ExportError;
use crate::models::{Classifier, ModelName, ModelSpec};
use crate::nn::{Layer, LayerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub scale: f32,
    pub zero_point: i8,
    pub codes: Vec<i8>,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor) -> Result<Self, ExportError> {
        if !t.all_finite() {
            return Err(ExportError::NonFinite);
        }
        let data = t.data();
        let min = data.iter().fold(0.0f64, |m, &v| m.min(f64::from(v)));
        let max = data.iter().fold(0.0f64, |m, &v| m.max(f64::from(v)));
        if min == max {
            return Ok(Self {
                shape: t.shape().to_vec(),
                scale: 1.0,
                zero_point: 0,
                codes: vec![0; data.len()],
            });
        }
        let mut scale = ((max - min) / 255.0) as f32;
        if f64::from(scale) * 255.0 < max - min {
            scale = scale.next_up();
        }
        let s = f64::from(scale);
        // Zero points keeping both ends within half a step of the grid.
        let lo = (-128.0 - min / s - 0.5).ceil().max(-128.0);
        let hi = (127.0 - max / s + 0.5).floor().min(127.0);
        let preferred = (-128.0 - min / s).round().clamp(lo.min(hi), hi.max(lo));
        let mut candidates = vec![preferred];
        candidates.extend((lo as i32..=hi as i32).map(f64::from).filter(|&z| z != preferred));
        for zp in candidates {
            let zp = zp as i8;
            if let Some(codes) = encode_all(data, s, zp) {
                return Ok(Self {
                    shape: t.shape().to_vec(),
                    scale,
                    zero_point: zp,
                    codes,
                });
            }
        }
        Err(ExportError::Format(format!(
            "no zero point represents the range [{min}, {max}] at scale {scale}"
        )))
    }

    /// The exact value code `i` stands for.
    pub fn dequantize_exact(&self, i: usize) -> f64 {
        f64::from(i32::from(self.codes[i]) - i32::from(self.zero_point)) * f64::from(self.scale)
    }

    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.codes.len()).map(|i| self.dequantize_exact(i) as f32).collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Nearest code for every value, or `None` if some value would land more
/// than half a step from its code.
fn encode_all(data: &[f32], s: f64, zp: i8) -> Option<Vec<i8>> {
    let zp = i32::from(zp);
    data.iter()
        .map(|&v| {
            let v = f64::from(v);
            let guess = (v / s).round() as i32 + zp;
            let best = (guess - 1..=guess + 1)
                .map(|q| q.clamp(-128, 127))
                .min_by(|&a, &b| {
                    let ea = (f64::from(a - zp) * s - v).abs();
                    let eb = (f64::from(b - zp) * s - v).abs();
                    ea.total_cmp(&eb)
                })
                .expect("three candidates");
            ((f64::from(best - zp) * s - v).abs() <= s / 2.0).then_some(best as i8)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub kind: LayerKind,
    /// Weights and bias for layers that have parameters.
    pub params: Option<(QuantizedTensor, QuantizedTensor)>,
}

/// A merged model with int8 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub name: ModelName,
    pub layers: Vec<QuantizedLayer>,
}

pub fn quantize_int8(model: &ModelSpec) -> Result<QuantizedModel, ExportError> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let params = if l.kind().has_params() {
                Some((
                    QuantizedTensor::quantize(l.weights())?,
                    QuantizedTensor::quantize(l.bias())?,
                ))
            } else {
                None
            };
            Ok(QuantizedLayer {
                kind: l.kind(),
                params,
            })
        })
        .collect::<Result<_, ExportError>>()?;
    Ok(QuantizedModel {
        name: model.name,
        layers,
    })
}

impl QuantizedModel {
    /// The float model whose parameters are the dequantized codes.
    pub fn dequantized(&self) -> Result<ModelSpec, ExportError> {
        let layers = self
            .layers
            .iter()
            .map(|ql| match &ql.params {
                Some((w, b)) => Layer::with_params(ql.kind, w.dequantize(), b.dequantize()),
                None => Ok(Layer::new(ql.kind)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let reference = crate::models::build(self.name);
        let spec = ModelSpec {
            name: self.name,
            layers,
            split_index: reference.split_index,
            input_shape: reference.input_shape,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Logits of the quantized model for one `[50, 13]` feature map, computed in
/// float on the dequantized parameters.
pub fn quantized_infer(q: &QuantizedModel, features: &Tensor) -> Result<Tensor, ExportError> {
    Ok(q.dequantized()?.logits(features)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within_half_step(q: &QuantizedTensor, t: &Tensor) -> bool {
        t.data()
            .iter()
            .enumerate()
            .all(|(i, &v)| 2.0 * (q.dequantize_exact(i) - f64::from(v)).abs() <= f64::from(q.scale))
    }

    #[test]
    fn symmetric_unit_range() {
        let t = Tensor::from_vec(vec![-1.0, 1.0]);
        let q = QuantizedTensor::quantize(&t).unwrap();
        let exact = 2.0 / 255.0;
        assert!(f64::from(q.scale) >= exact);
        assert!(f64::from(q.scale) - exact < 1e-9);
        assert_eq!(q.codes[0], -128);
        assert!(q.codes[1] >= 126);
        assert!(within_half_step(&q, &t));
    }

    #[test]
    fn all_zero_tensor_is_exact() {
        let t = Tensor::zeros(&[3, 2]);
        let q = QuantizedTensor::quantize(&t).unwrap();
        assert_eq!((q.scale, q.zero_point), (1.0, 0));
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.dequantize(), t);
    }

    #[test]
    fn one_sided_ranges_keep_zero_exact() {
        for data in [vec![0.5, 2.0, 3.25], vec![-7.0, -0.125], vec![1e-30, 2e-30]] {
            let t = Tensor::from_vec(data);
            let q = QuantizedTensor::quantize(&t).unwrap();
            assert!(within_half_step(&q, &t));
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            QuantizedTensor::quantize(&Tensor::from_vec(vec![1.0, f32::NAN])),
            Err(ExportError::NonFinite)
        ));
        assert!(QuantizedTensor::quantize(&Tensor::from_vec(vec![f32::INFINITY])).is_err());
    }
}
