//! ResNet-50/101/152 bottleneck backbones with a penultimate feature tap.

use super::{ClassifierOutput, ImageClassifier, ModelArch};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchNorm2d;
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::pool::{GlobalAvgPool, MaxPool2d, Relu};
use crate::nn::{ForwardMode, NamedTensor, NamedTensorMut, Param};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

pub const IMAGENET_CLASSES: usize = 1000;

/// Penultimate width shared by all three variants.
pub const RESNET_FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResNetVariant {
    Resnet50,
    Resnet101,
    Resnet152,
}

impl ResNetVariant {
    pub fn from_backbone(id: super::BackboneId) -> Option<Self> {
        match id {
            super::BackboneId::Resnet50 => Some(ResNetVariant::Resnet50),
            super::BackboneId::Resnet101 => Some(ResNetVariant::Resnet101),
            super::BackboneId::Resnet152 => Some(ResNetVariant::Resnet152),
            _ => None,
        }
    }

    pub fn block_counts(&self) -> [usize; 4] {
        match self {
            ResNetVariant::Resnet50 => [3, 4, 6, 3],
            ResNetVariant::Resnet101 => [3, 4, 23, 3],
            ResNetVariant::Resnet152 => [3, 8, 36, 3],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ResNetVariant::Resnet50 => "resnet50",
            ResNetVariant::Resnet101 => "resnet101",
            ResNetVariant::Resnet152 => "resnet152",
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    conv3: Conv2d<F>,
    bn3: BatchNorm2d<F>,
    downsample: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    relu1: Relu,
    relu2: Relu,
    relu3: Relu,
}

impl<F: Scalar> Bottleneck<F> {
    fn new(
        name: &str,
        rng: &mut crate::rng::Rng,
        in_ch: usize,
        width: usize,
        stride: usize,
        downsample: bool,
    ) -> Self {
        let out_ch = width * 4;
        Bottleneck {
            conv1: Conv2d::new(&format!("{name}.conv1"), rng, in_ch, width, 1, 1, 0, false),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), width),
            conv2: Conv2d::new(&format!("{name}.conv2"), rng, width, width, 3, stride, 1, false),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), width),
            conv3: Conv2d::new(&format!("{name}.conv3"), rng, width, out_ch, 1, 1, 0, false),
            bn3: BatchNorm2d::new(&format!("{name}.bn3"), out_ch),
            downsample: downsample.then(|| {
                (
                    Conv2d::new(&format!("{name}.downsample.0"), rng, in_ch, out_ch, 1, stride, 0, false),
                    BatchNorm2d::new(&format!("{name}.downsample.1"), out_ch),
                )
            }),
            relu1: Relu::new(),
            relu2: Relu::new(),
            relu3: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: ForwardMode) -> Array4<F> {
        let cache = mode.caches();
        let identity = match &mut self.downsample {
            Some((conv, bn)) => {
                let h = conv.forward(x, cache);
                bn.forward(&h, mode)
            }
            None => x.clone(),
        };
        let h = self.conv1.forward(x, cache);
        let h = self.bn1.forward(&h, mode);
        let h = self.relu1.forward(h, cache);
        let h = self.conv2.forward(&h, cache);
        let h = self.bn2.forward(&h, mode);
        let h = self.relu2.forward(h, cache);
        let h = self.conv3.forward(&h, cache);
        let mut h = self.bn3.forward(&h, mode);
        h += &identity;
        self.relu3.forward(h, cache)
    }

    fn backward(&mut self, dy: Array4<F>) -> Array4<F> {
        let d = self.relu3.backward(dy);
        // gradient splits between the main path and the skip connection
        let d_main = self.bn3.backward(&d);
        let d_main = self.conv3.backward(&d_main);
        let d_main = self.relu2.backward(d_main);
        let d_main = self.bn2.backward(&d_main);
        let d_main = self.conv2.backward(&d_main);
        let d_main = self.relu1.backward(d_main);
        let d_main = self.bn1.backward(&d_main);
        let mut dx = self.conv1.backward(&d_main);
        match &mut self.downsample {
            Some((conv, bn)) => {
                let d_skip = bn.backward(&d);
                dx += &conv.backward(&d_skip);
            }
            None => dx += &d,
        }
        dx
    }

    fn layers_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = Vec::new();
        v.extend(self.conv1.params_mut());
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.conv3.params_mut());
        v.extend(self.bn3.params_mut());
        if let Some((c, b)) = &mut self.downsample {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }

    fn layers(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = vec![&self.conv1.weight, &self.bn1.gamma, &self.bn1.beta];
        v.push(&self.conv2.weight);
        v.push(&self.bn2.gamma);
        v.push(&self.bn2.beta);
        v.push(&self.conv3.weight);
        v.push(&self.bn3.gamma);
        v.push(&self.bn3.beta);
        if let Some((c, b)) = &self.downsample {
            v.push(&c.weight);
            v.push(&b.gamma);
            v.push(&b.beta);
        }
        v
    }

    fn named_tensors(&self) -> Vec<NamedTensor<'_, F>> {
        let mut v = Vec::new();
        v.extend(self.conv1.named_tensors());
        v.extend(self.bn1.named_tensors());
        v.extend(self.conv2.named_tensors());
        v.extend(self.bn2.named_tensors());
        v.extend(self.conv3.named_tensors());
        v.extend(self.bn3.named_tensors());
        if let Some((c, b)) = &self.downsample {
            v.extend(c.named_tensors());
            v.extend(b.named_tensors());
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>> {
        let mut v = Vec::new();
        v.extend(self.conv1.named_tensors_mut());
        v.extend(self.bn1.named_tensors_mut());
        v.extend(self.conv2.named_tensors_mut());
        v.extend(self.bn2.named_tensors_mut());
        v.extend(self.conv3.named_tensors_mut());
        v.extend(self.bn3.named_tensors_mut());
        if let Some((c, b)) = &mut self.downsample {
            v.extend(c.named_tensors_mut());
            v.extend(b.named_tensors_mut());
        }
        v
    }

    fn clear_caches(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        self.conv3.clear_cache();
        self.bn3.clear_cache();
        if let Some((c, b)) = &mut self.downsample {
            c.clear_cache();
            b.clear_cache();
        }
        self.relu1.clear_cache();
        self.relu2.clear_cache();
        self.relu3.clear_cache();
    }
}

#[derive(Debug, Clone)]
pub struct ResNetModel<F: Scalar> {
    variant: ResNetVariant,
    num_classes: usize,
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    stem_relu: Relu,
    maxpool: MaxPool2d<F>,
    stages: Vec<Vec<Bottleneck<F>>>,
    gap: GlobalAvgPool,
    fc: Linear<F>,
    /// Stage outputs kept only for Grad-CAM taps.
    stage_activations: Vec<Option<Array4<F>>>,
}

impl<F: Scalar> ResNetModel<F> {
    pub fn new(variant: ResNetVariant, num_classes: usize, init_seed: u64) -> Self {
        let mut rng = rng_from_seed(init_seed);
        let conv1 = Conv2d::new("conv1", &mut rng, 3, 64, 7, 2, 3, false);
        let bn1 = BatchNorm2d::new("bn1", 64);
        let counts = variant.block_counts();
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for (si, &n) in counts.iter().enumerate() {
            let width = 64 << si;
            let stride = if si == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for bi in 0..n {
                let name = format!("layer{}.{bi}", si + 1);
                let (s, down, ic) = if bi == 0 {
                    (stride, true, in_ch)
                } else {
                    (1, false, width * 4)
                };
                blocks.push(Bottleneck::new(&name, &mut rng, ic, width, s, down));
            }
            in_ch = width * 4;
            stages.push(blocks);
        }
        let fc = Linear::new("fc", &mut rng, RESNET_FEATURE_DIM, num_classes);
        ResNetModel {
            variant,
            num_classes,
            conv1,
            bn1,
            stem_relu: Relu::new(),
            maxpool: MaxPool2d::new(3, 2, 1),
            stages,
            gap: GlobalAvgPool::new(),
            fc,
            stage_activations: vec![None, None, None, None],
        }
    }

    pub fn variant(&self) -> ResNetVariant {
        self.variant
    }
}

impl<F: Scalar> ImageClassifier<F> for ResNetModel<F> {
    fn arch(&self) -> ModelArch {
        ModelArch::Resnet { variant: self.variant, num_classes: self.num_classes }
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn penult_dim(&self) -> usize {
        RESNET_FEATURE_DIM
    }

    fn forward(&mut self, x: &Array4<F>, mode: ForwardMode) -> Result<ClassifierOutput<F>> {
        let (_, c, _, _) = x.dim();
        if c != 3 {
            return Err(Error::input(format!("expected 3 input channels, got {c}")));
        }
        let cache = mode.caches();
        let h = self.conv1.forward(x, cache);
        let h = self.bn1.forward(&h, mode);
        let h = self.stem_relu.forward(h, cache);
        let mut h = self.maxpool.forward(&h, cache);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                h = block.forward(&h, mode);
            }
            if mode == ForwardMode::EvalGrad {
                self.stage_activations[si] = Some(h.clone());
            }
        }
        let penult = self.gap.forward(&h, cache);
        let logits = self.fc.forward(penult.view(), cache);
        Ok(ClassifierOutput { penult, logits })
    }

    fn backward(&mut self, d_logits: &Array2<F>, d_penult: Option<&Array2<F>>) {
        let mut d_pen = self.fc.backward(d_logits.view());
        if let Some(extra) = d_penult {
            d_pen += extra;
        }
        let mut d = self.gap.backward(&d_pen);
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                d = block.backward(d);
            }
        }
        let d = self.maxpool.backward(&d);
        let d = self.stem_relu.backward(d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d);
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> =
            vec![&self.conv1.weight, &self.bn1.gamma, &self.bn1.beta];
        for stage in &self.stages {
            for block in stage {
                v.extend(block.layers());
            }
        }
        v.push(&self.fc.weight);
        v.push(&self.fc.bias);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = Vec::new();
        v.extend(self.conv1.params_mut());
        v.extend(self.bn1.params_mut());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                v.extend(block.layers_mut());
            }
        }
        v.extend(self.fc.params_mut());
        v
    }

    fn named_tensors(&self) -> Vec<NamedTensor<'_, F>> {
        let mut v = Vec::new();
        v.extend(self.conv1.named_tensors());
        v.extend(self.bn1.named_tensors());
        for stage in &self.stages {
            for block in stage {
                v.extend(block.named_tensors());
            }
        }
        v.extend(self.fc.named_tensors());
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>> {
        let mut v = Vec::new();
        v.extend(self.conv1.named_tensors_mut());
        v.extend(self.bn1.named_tensors_mut());
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                v.extend(block.named_tensors_mut());
            }
        }
        v.extend(self.fc.named_tensors_mut());
        v
    }

    /// Stem conv, stem bn, stem pooling, then the four residual stages.
    fn layer_group_names(&self) -> Vec<String> {
        vec![
            "conv1".into(),
            "bn1".into(),
            "maxpool".into(),
            "layer1".into(),
            "layer2".into(),
            "layer3".into(),
            "layer4".into(),
        ]
    }

    fn apply_prefix_freeze(&mut self, depth: usize) {
        for p in self.conv1.params_mut() {
            p.trainable = depth < 1;
        }
        for p in self.bn1.params_mut() {
            p.trainable = depth < 2;
        }
        // group 2 is the (parameter-free) stem pooling stage
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let trainable = depth < si + 4;
            for block in stage.iter_mut() {
                for p in block.layers_mut() {
                    p.trainable = trainable;
                }
            }
        }
    }

    fn reinit_head(&mut self, num_classes: usize, init_seed: u64) {
        let mut rng = rng_from_seed(init_seed);
        self.fc = Linear::new("fc", &mut rng, RESNET_FEATURE_DIM, num_classes);
        self.num_classes = num_classes;
    }

    fn conv_layer_names(&self) -> Vec<String> {
        (1..=4).map(|i| format!("layer{i}")).collect()
    }

    fn gradcam_tap(
        &mut self,
        x: &Array4<F>,
        target_class: usize,
        layer: &str,
    ) -> Result<(Array4<F>, Array4<F>)> {
        let Some(idx) = self.conv_layer_names().iter().position(|n| n == layer) else {
            return Err(Error::config(format!(
                "'{layer}' is not a convolutional activation of this model"
            )));
        };
        if target_class >= self.num_classes {
            return Err(Error::input(format!(
                "target class {target_class} out of range for {} classes",
                self.num_classes
            )));
        }
        let out = self.forward(x, ForwardMode::EvalGrad)?;
        let mut d_logits = Array2::<F>::zeros(out.logits.raw_dim());
        for mut row in d_logits.outer_iter_mut() {
            row[target_class] = F::one();
        }
        let d_pen = self.fc.backward(d_logits.view());
        let mut d = self.gap.backward(&d_pen);
        for si in ((idx + 1)..4).rev() {
            for block in self.stages[si].iter_mut().rev() {
                d = block.backward(d);
            }
        }
        let act = self.stage_activations[idx]
            .clone()
            .expect("EvalGrad forward stores stage activations");
        Ok((act, d))
    }

    fn clear_caches(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.stem_relu.clear_cache();
        self.maxpool.clear_cache();
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                block.clear_caches();
            }
        }
        self.fc.clear_cache();
        for a in &mut self.stage_activations {
            *a = None;
        }
    }
}
