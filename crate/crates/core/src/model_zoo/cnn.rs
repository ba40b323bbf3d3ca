//! Plain CNN classifier built from a [`StudentArchSpec`]: conv blocks
//! (conv + batch-norm + ReLU + optional 2x2 max pool), global average
//! pooling, and a single fully connected head. Serves as the lightweight
//! student and as the desk-scale toy teachers.

use super::{ClassifierOutput, ImageClassifier, ModelArch, StudentArchSpec};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchNorm2d;
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::pool::{GlobalAvgPool, MaxPool2d, Relu};
use crate::nn::{ForwardMode, NamedTensor, NamedTensorMut, Param};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};

#[derive(Debug, Clone)]
struct ConvBlock<F: Scalar> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    relu: Relu,
    pool: Option<MaxPool2d<F>>,
    /// Post-ReLU activation, kept only for Grad-CAM taps.
    activation: Option<Array4<F>>,
}

impl<F: Scalar> ConvBlock<F> {
    fn forward(&mut self, x: &Array4<F>, mode: ForwardMode) -> Array4<F> {
        let cache = mode.caches();
        let y = self.conv.forward(x, cache);
        let y = self.bn.forward(&y, mode);
        let y = self.relu.forward(y, cache);
        if mode == ForwardMode::EvalGrad {
            self.activation = Some(y.clone());
        }
        match &mut self.pool {
            Some(p) => p.forward(&y, cache),
            None => y,
        }
    }

    fn backward(&mut self, dy: Array4<F>) -> Array4<F> {
        let d = self.backward_to_activation(dy);
        let d = self.relu.backward(d);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    /// Backprop only through the pooling stage, returning the gradient at
    /// the post-ReLU activation.
    fn backward_to_activation(&mut self, dy: Array4<F>) -> Array4<F> {
        match &mut self.pool {
            Some(p) => p.backward(&dy),
            None => dy,
        }
    }

    fn clear_caches(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.relu.clear_cache();
        if let Some(p) = &mut self.pool {
            p.clear_cache();
        }
        self.activation = None;
    }
}

#[derive(Debug, Clone)]
pub struct CnnClassifier<F: Scalar> {
    spec: StudentArchSpec,
    blocks: Vec<ConvBlock<F>>,
    gap: GlobalAvgPool,
    head: Linear<F>,
}

impl<F: Scalar> CnnClassifier<F> {
    pub fn new(spec: StudentArchSpec, init_seed: u64) -> Self {
        let mut rng = rng_from_seed(init_seed);
        let blocks = spec
            .conv_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ConvBlock {
                conv: Conv2d::new(
                    &format!("block{i}.conv"),
                    &mut rng,
                    b.in_channels,
                    b.out_channels,
                    b.kernel_size,
                    1,
                    b.kernel_size / 2,
                    true,
                ),
                bn: BatchNorm2d::new(&format!("block{i}.bn"), b.out_channels),
                relu: Relu::new(),
                pool: b.pool.then(|| MaxPool2d::new(2, 2, 0)),
                activation: None,
            })
            .collect();
        let head = Linear::new("head", &mut rng, spec.head_width, spec.num_classes);
        CnnClassifier { spec, blocks, gap: GlobalAvgPool::new(), head }
    }

    pub fn spec(&self) -> &StudentArchSpec {
        &self.spec
    }
}

impl<F: Scalar> ImageClassifier<F> for CnnClassifier<F> {
    fn arch(&self) -> ModelArch {
        ModelArch::Cnn { spec: self.spec.clone() }
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn penult_dim(&self) -> usize {
        self.spec.head_width
    }

    fn forward(&mut self, x: &Array4<F>, mode: ForwardMode) -> Result<ClassifierOutput<F>> {
        let (_, c, _, _) = x.dim();
        if c != self.spec.conv_blocks[0].in_channels {
            return Err(Error::input(format!(
                "expected {} input channels, got {c}",
                self.spec.conv_blocks[0].in_channels
            )));
        }
        let mut h = self.blocks[0].forward(x, mode);
        for block in &mut self.blocks[1..] {
            h = block.forward(&h, mode);
        }
        let penult = self.gap.forward(&h, mode.caches());
        let logits = self.head.forward(penult.view(), mode.caches());
        Ok(ClassifierOutput { penult, logits })
    }

    fn backward(&mut self, d_logits: &Array2<F>, d_penult: Option<&Array2<F>>) {
        let mut d_pen = self.head.backward(d_logits.view());
        if let Some(extra) = d_penult {
            d_pen += extra;
        }
        let mut d = self.gap.backward(&d_pen);
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(d);
        }
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.conv.weight);
            if let Some(bias) = &b.conv.bias {
                v.push(bias);
            }
            v.push(&b.bn.gamma);
            v.push(&b.bn.beta);
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn named_tensors(&self) -> Vec<NamedTensor<'_, F>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.conv.named_tensors());
            v.extend(b.bn.named_tensors());
        }
        v.extend(self.head.named_tensors());
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend(b.conv.named_tensors_mut());
            v.extend(b.bn.named_tensors_mut());
        }
        v.extend(self.head.named_tensors_mut());
        v
    }

    fn layer_group_names(&self) -> Vec<String> {
        (0..self.blocks.len()).map(|i| format!("block{i}")).collect()
    }

    fn apply_prefix_freeze(&mut self, depth: usize) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let trainable = i >= depth;
            for p in b.conv.params_mut() {
                p.trainable = trainable;
            }
            for p in b.bn.params_mut() {
                p.trainable = trainable;
            }
        }
    }

    fn reinit_head(&mut self, num_classes: usize, init_seed: u64) {
        let mut rng = rng_from_seed(init_seed);
        self.head = Linear::new("head", &mut rng, self.spec.head_width, num_classes);
        self.spec.num_classes = num_classes;
    }

    fn conv_layer_names(&self) -> Vec<String> {
        self.layer_group_names()
    }

    fn gradcam_tap(
        &mut self,
        x: &Array4<F>,
        target_class: usize,
        layer: &str,
    ) -> Result<(Array4<F>, Array4<F>)> {
        let Some(idx) = self
            .layer_group_names()
            .iter()
            .position(|n| n == layer)
        else {
            return Err(Error::config(format!(
                "'{layer}' is not a convolutional activation of this model"
            )));
        };
        if target_class >= self.num_classes() {
            return Err(Error::input(format!(
                "target class {target_class} out of range for {} classes",
                self.num_classes()
            )));
        }
        let out = self.forward(x, ForwardMode::EvalGrad)?;
        let mut d_logits = Array2::<F>::zeros(out.logits.raw_dim());
        for mut row in d_logits.outer_iter_mut() {
            row[target_class] = F::one();
        }
        let d_pen = self.head.backward(d_logits.view());
        let mut d = self.gap.backward(&d_pen);
        for bi in (idx + 1..self.blocks.len()).rev() {
            d = self.blocks[bi].backward(d);
        }
        let d_act = self.blocks[idx].backward_to_activation(d);
        let act = self.blocks[idx]
            .activation
            .clone()
            .expect("EvalGrad forward stores activations");
        Ok((act, d_act))
    }

    fn clear_caches(&mut self) {
        for b in &mut self.blocks {
            b.clear_caches();
        }
        self.head.clear_cache();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_student, count_parameters, freeze_prefix};

    /// Independent per-layer arithmetic for a plain CNN spec.
    fn oracle_param_count(spec: &StudentArchSpec) -> usize {
        let mut total = 0;
        for b in &spec.conv_blocks {
            total += b.out_channels * b.in_channels * b.kernel_size * b.kernel_size; // conv w
            total += b.out_channels; // conv bias
            total += 2 * b.out_channels; // bn gamma+beta
        }
        total += spec.num_classes * spec.head_width + spec.num_classes; // head
        total
    }

    #[test]
    fn default_recipe_matches_published_budget() {
        let spec = StudentArchSpec::default_recipe(23);
        let model = build_student::<f32>(&spec, 0).unwrap();
        let report = count_parameters(&model);
        assert_eq!(report.total_parameters, oracle_param_count(&spec));
        assert_eq!(report.total_parameters, 51_199);
        // within 5% of the published 51,895 student budget
        let rel = (report.total_parameters as f64 - 51_895.0).abs() / 51_895.0;
        assert!(rel < 0.05, "relative deviation {rel}");
        assert_eq!(report.trainable_parameters, report.total_parameters);
    }

    #[test]
    fn single_class_head_is_rejected() {
        let mut spec = StudentArchSpec::default_recipe(23);
        spec.num_classes = 1;
        assert!(matches!(build_student::<f32>(&spec, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn inconsistent_channel_chain_is_rejected() {
        let mut spec = StudentArchSpec::default_recipe(4);
        spec.conv_blocks[1].in_channels = 33;
        assert!(matches!(build_student::<f32>(&spec, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn hand_counted_layers() {
        // single fully connected layer 64 -> 23 with bias
        let mut rng = crate::rng::rng_from_seed(0);
        let lin = Linear::<f32>::new("fc", &mut rng, 64, 23);
        assert_eq!(lin.weight.len() + lin.bias.len(), 1_495);
        // conv 3 -> 32, 3x3, with bias
        let conv = Conv2d::<f32>::new("c", &mut rng, 3, 32, 3, 1, 1, true);
        assert_eq!(conv.weight.len() + conv.bias.as_ref().unwrap().len(), 896);
    }

    #[test]
    fn freeze_prefix_boundaries_and_idempotence() {
        let spec = StudentArchSpec::default_recipe(4);
        let mut model = build_student::<f32>(&spec, 0).unwrap();
        let total = count_parameters(&model).total_parameters;

        freeze_prefix(&mut model, 0).unwrap();
        assert_eq!(count_parameters(&model).trainable_parameters, total);

        // all groups frozen: only the head remains trainable
        freeze_prefix(&mut model, 3).unwrap();
        let head_params = 64 * 4 + 4;
        assert_eq!(count_parameters(&model).trainable_parameters, head_params);

        freeze_prefix(&mut model, 3).unwrap();
        assert_eq!(count_parameters(&model).trainable_parameters, head_params);

        assert!(freeze_prefix(&mut model, 4).is_err());

        // re-freezing with a smaller depth re-enables later groups
        freeze_prefix(&mut model, 1).unwrap();
        let b0 = 32 * 3 * 9 + 32 + 64;
        assert_eq!(count_parameters(&model).trainable_parameters, total - b0);
    }

    #[test]
    fn forward_is_finite_for_extreme_inputs() {
        let spec = StudentArchSpec {
            conv_blocks: vec![
                ConvBlockSpec { in_channels: 3, out_channels: 8, kernel_size: 3, pool: true },
                ConvBlockSpec { in_channels: 8, out_channels: 12, kernel_size: 3, pool: true },
            ],
            head_width: 12,
            num_classes: 5,
        };
        let mut model = build_student::<f32>(&spec, 7).unwrap();
        for x in [
            Array4::<f32>::zeros((2, 3, 224, 224)),
            Array4::<f32>::ones((2, 3, 224, 224)),
            Array4::from_shape_fn((2, 3, 224, 224), |(a, b, c, d)| {
                (((a + 1) * (b + 2) * (c + 3) + d) % 97) as f32 / 97.0
            }),
        ] {
            let out = model.forward(&x, ForwardMode::Eval).unwrap();
            assert_eq!(out.logits.dim(), (2, 5));
            assert!(out.logits.iter().all(|v| v.is_finite()));
            assert!(out.penult.iter().all(|v| v.is_finite()));
        }
    }

    use super::super::ConvBlockSpec;
}
