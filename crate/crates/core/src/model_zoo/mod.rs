//! Model construction: the lightweight student CNN, teacher backbones with
//! feature taps and partial freezing, and complexity accounting.

pub mod cnn;
pub mod resnet;

pub use cnn::CnnClassifier;
pub use resnet::ResNetModel;

use crate::error::{Error, Result};
use crate::nn::{NamedTensor, NamedTensorMut, Param};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub use crate::nn::ForwardMode;

/// Spatial input size every classifier in this crate is trained at.
pub const INPUT_SIZE: usize = 224;

/// One convolutional block: conv + batch-norm + ReLU, optionally followed by
/// a 2x2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub pool: bool,
}

/// Architecture of a plain CNN classifier (the student, and the toy teachers
/// used for desk-scale runs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentArchSpec {
    pub conv_blocks: Vec<ConvBlockSpec>,
    /// Channels entering the classifier head (must equal the last block's
    /// out_channels).
    pub head_width: usize,
    pub num_classes: usize,
}

impl StudentArchSpec {
    /// The default recipe: three 3x3 conv blocks 3->32->56->64, each with
    /// batch-norm, ReLU and 2x2 max pooling, global average pooling, and a
    /// single fully connected head.
    pub fn default_recipe(num_classes: usize) -> Self {
        StudentArchSpec {
            conv_blocks: vec![
                ConvBlockSpec { in_channels: 3, out_channels: 32, kernel_size: 3, pool: true },
                ConvBlockSpec { in_channels: 32, out_channels: 56, kernel_size: 3, pool: true },
                ConvBlockSpec { in_channels: 56, out_channels: 64, kernel_size: 3, pool: true },
            ],
            head_width: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::config("at least one conv block is required"));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.in_channels == 0 || b.out_channels == 0 {
                return Err(Error::config(format!("block {i}: channel counts must be >= 1")));
            }
            if b.kernel_size == 0 || b.kernel_size % 2 == 0 {
                return Err(Error::config(format!(
                    "block {i}: kernel_size must be odd and >= 1, got {}",
                    b.kernel_size
                )));
            }
            if i > 0 && self.conv_blocks[i - 1].out_channels != b.in_channels {
                return Err(Error::config(format!(
                    "inconsistent channel chain: block {} out_channels {} != block {} in_channels {}",
                    i - 1,
                    self.conv_blocks[i - 1].out_channels,
                    i,
                    b.in_channels
                )));
            }
        }
        if self.conv_blocks[0].in_channels != 3 {
            return Err(Error::config("first block must accept 3 input channels"));
        }
        let last = self.conv_blocks.last().unwrap().out_channels;
        if self.head_width != last {
            return Err(Error::config(format!(
                "head_width {} != last block out_channels {last}",
                self.head_width
            )));
        }
        Ok(())
    }
}

/// Teacher backbone identifiers. The three ResNet variants are the paper
/// backbones; the two toy CNNs stand in for them in desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    Resnet50,
    Resnet101,
    Resnet152,
    ToyA,
    ToyB,
}

impl BackboneId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet50" | "rn50" => Ok(BackboneId::Resnet50),
            "resnet101" | "rn101" => Ok(BackboneId::Resnet101),
            "resnet152" | "rn152" => Ok(BackboneId::Resnet152),
            "toy_a" => Ok(BackboneId::ToyA),
            "toy_b" => Ok(BackboneId::ToyB),
            other => Err(Error::config(format!("unknown backbone id: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneId::Resnet50 => "resnet50",
            BackboneId::Resnet101 => "resnet101",
            BackboneId::Resnet152 => "resnet152",
            BackboneId::ToyA => "toy_a",
            BackboneId::ToyB => "toy_b",
        }
    }

    /// Toy teacher recipes; the head width is the penultimate dimension.
    pub fn toy_spec(&self, num_classes: usize) -> Option<StudentArchSpec> {
        let chain: &[usize] = match self {
            BackboneId::ToyA => &[3, 16, 32, 48, 64, 80],
            BackboneId::ToyB => &[3, 16, 40, 64, 96],
            _ => return None,
        };
        let conv_blocks = chain
            .windows(2)
            .map(|w| ConvBlockSpec {
                in_channels: w[0],
                out_channels: w[1],
                kernel_size: 3,
                pool: true,
            })
            .collect::<Vec<_>>();
        let head_width = *chain.last().unwrap();
        Some(StudentArchSpec { conv_blocks, head_width, num_classes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    Pretrained,
    Finetuned,
    Scratch,
}

/// Teacher construction request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub backbone_id: BackboneId,
    pub weights_mode: WeightsMode,
    /// Leading layer groups held fixed during fine-tuning.
    pub frozen_prefix_depth: usize,
    /// Classifier head width; defaults to the backbone's native head
    /// (1000 for the ResNet variants).
    #[serde(default)]
    pub num_classes: Option<usize>,
}

/// Where a feature tap reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Post global-pool, pre classifier.
    Penultimate,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTap {
    pub tap_point: TapPoint,
    pub dimension: usize,
}

impl FeatureTap {
    pub fn penultimate_of<F: Scalar>(model: &dyn ImageClassifier<F>) -> Self {
        FeatureTap { tap_point: TapPoint::Penultimate, dimension: model.penult_dim() }
    }

    pub fn logits_of<F: Scalar>(model: &dyn ImageClassifier<F>) -> Self {
        FeatureTap { tap_point: TapPoint::Logits, dimension: model.num_classes() }
    }
}

/// Parameter and size accounting for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelComplexityReport {
    pub total_parameters: usize,
    pub trainable_parameters: usize,
    pub serialized_size_bytes: usize,
}

/// Serializable architecture descriptor embedded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    Cnn { spec: StudentArchSpec },
    Resnet { variant: resnet::ResNetVariant, num_classes: usize },
}

impl ModelArch {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelArch::Cnn { spec } => spec.num_classes,
            ModelArch::Resnet { num_classes, .. } => *num_classes,
        }
    }
}

/// Output of a classifier forward pass.
pub struct ClassifierOutput<F: Scalar> {
    /// Penultimate representation: post global-pool, pre classifier, (B, D).
    pub penult: Array2<F>,
    /// Pre-softmax class scores, (B, K).
    pub logits: Array2<F>,
}

/// Common interface over the student CNN and the teacher backbones.
pub trait ImageClassifier<F: Scalar>: Send {
    fn arch(&self) -> ModelArch;
    fn num_classes(&self) -> usize;
    fn penult_dim(&self) -> usize;

    fn forward(&mut self, x: &Array4<F>, mode: ForwardMode) -> Result<ClassifierOutput<F>>;

    /// Backpropagate from the head. `d_penult` lets feature-space losses
    /// inject gradient at the penultimate representation.
    fn backward(&mut self, d_logits: &Array2<F>, d_penult: Option<&Array2<F>>);

    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;
    fn named_tensors(&self) -> Vec<NamedTensor<'_, F>>;
    fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>>;

    /// Freezable leading layer groups, in order. The classifier head is not
    /// part of the freezable prefix.
    fn layer_group_names(&self) -> Vec<String>;
    /// Set trainability so groups before `depth` are frozen and the rest
    /// (plus the head) are trainable. Called through [`freeze_prefix`].
    fn apply_prefix_freeze(&mut self, depth: usize);

    /// Replace the classifier head with a freshly initialized one of
    /// `num_classes` outputs (used when adapting a pretrained backbone to
    /// the task's class count).
    fn reinit_head(&mut self, num_classes: usize, init_seed: u64);

    /// Names accepted by [`ImageClassifier::gradcam_tap`].
    fn conv_layer_names(&self) -> Vec<String>;
    /// Forward in inference mode with caches, then backpropagate the
    /// one-hot gradient of `target_class`'s logit down to the named
    /// convolutional activation. Returns (activation, gradient), both
    /// (B, C, h, w).
    fn gradcam_tap(
        &mut self,
        x: &Array4<F>,
        target_class: usize,
        layer: &str,
    ) -> Result<(Array4<F>, Array4<F>)>;

    fn clear_caches(&mut self);
}

/// Build the student network from its architecture spec.
pub fn build_student<F: Scalar>(spec: &StudentArchSpec, init_seed: u64) -> Result<CnnClassifier<F>> {
    spec.validate()?;
    Ok(CnnClassifier::new(spec.clone(), init_seed))
}

/// Resolve the weights directory from `DISTILLKIT_WEIGHTS_DIR`.
pub fn weights_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("DISTILLKIT_WEIGHTS_DIR").map(PathBuf::from)
}

/// Build a teacher backbone. Pretrained/finetuned weights are loaded from
/// `weights_dir` (falling back to `DISTILLKIT_WEIGHTS_DIR`); a missing
/// weights file is a resource error, never a silent fall back to random
/// initialization.
pub fn build_teacher<F: Scalar>(
    spec: &TeacherSpec,
    weights_dir: Option<&Path>,
    init_seed: u64,
) -> Result<Box<dyn ImageClassifier<F>>> {
    let build_fresh = |classes: Option<usize>| -> Result<Box<dyn ImageClassifier<F>>> {
        match spec.backbone_id {
            BackboneId::ToyA | BackboneId::ToyB => {
                let classes = classes.ok_or_else(|| {
                    Error::config("toy teacher backbones require num_classes to be set")
                })?;
                let arch = spec.backbone_id.toy_spec(classes).unwrap();
                Ok(Box::new(CnnClassifier::new(arch, init_seed)))
            }
            _ => {
                let variant = resnet::ResNetVariant::from_backbone(spec.backbone_id).unwrap();
                let classes = classes.unwrap_or(resnet::IMAGENET_CLASSES);
                Ok(Box::new(ResNetModel::new(variant, classes, init_seed)))
            }
        }
    };

    let resolve_weights = |suffix: &str| -> Result<PathBuf> {
        let dir = weights_dir
            .map(Path::to_path_buf)
            .or_else(weights_dir_from_env)
            .ok_or_else(|| {
                Error::resource(
                    "pretrained weights requested but no weights directory is configured \
                     (set DISTILLKIT_WEIGHTS_DIR)",
                )
            })?;
        let path = dir.join(format!("{}{}.ckpt", spec.backbone_id.name(), suffix));
        if !path.is_file() {
            return Err(Error::resource(format!(
                "weights file not found: {}",
                path.display()
            )));
        }
        Ok(path)
    };

    let mut model: Box<dyn ImageClassifier<F>> = match spec.weights_mode {
        WeightsMode::Scratch => build_fresh(spec.num_classes)?,
        WeightsMode::Pretrained => {
            // Pretrained archives carry the backbone's native head; the head
            // is re-dimensioned afterwards if the task needs a different one.
            let path = resolve_weights("")?;
            let mut m = build_fresh(None)?;
            crate::checkpoint::load_weights_into(&path, m.as_mut())?;
            if let Some(classes) = spec.num_classes {
                if classes != m.num_classes() {
                    m.reinit_head(classes, init_seed);
                }
            }
            m
        }
        WeightsMode::Finetuned => {
            // Fine-tuned archives already carry the task head; rebuild from
            // the embedded architecture.
            let path = resolve_weights("_finetuned")?;
            let (m, header, _) = crate::checkpoint::load_model::<F>(&path)?;
            let matches_backbone = match (&header.arch_spec, spec.backbone_id) {
                (ModelArch::Resnet { variant, .. }, id) => {
                    resnet::ResNetVariant::from_backbone(id) == Some(*variant)
                }
                (ModelArch::Cnn { .. }, BackboneId::ToyA | BackboneId::ToyB) => true,
                _ => false,
            };
            if !matches_backbone {
                return Err(Error::resource(format!(
                    "fine-tuned weights at {} do not match backbone {}",
                    path.display(),
                    spec.backbone_id.name()
                )));
            }
            m
        }
    };

    let groups = model.layer_group_names().len();
    if spec.frozen_prefix_depth > groups {
        return Err(Error::config(format!(
            "frozen_prefix_depth {} exceeds {} layer groups",
            spec.frozen_prefix_depth, groups
        )));
    }
    model.apply_prefix_freeze(spec.frozen_prefix_depth);
    Ok(model)
}

/// Read activations at a tap point in inference mode.
pub fn tap_features<F: Scalar>(
    model: &mut dyn ImageClassifier<F>,
    tap: &FeatureTap,
    batch: &Array4<F>,
) -> Result<Array2<F>> {
    let (_, c, h, w) = batch.dim();
    if c != 3 || h != INPUT_SIZE || w != INPUT_SIZE {
        return Err(Error::input(format!(
            "expected batch shaped Bx3x{INPUT_SIZE}x{INPUT_SIZE}, got Bx{c}x{h}x{w}"
        )));
    }
    let expected = match tap.tap_point {
        TapPoint::Penultimate => model.penult_dim(),
        TapPoint::Logits => model.num_classes(),
    };
    if tap.dimension != expected {
        return Err(Error::input(format!(
            "tap dimension {} does not match the bound model's width {expected}",
            tap.dimension
        )));
    }
    let out = model.forward(batch, ForwardMode::Eval)?;
    Ok(match tap.tap_point {
        TapPoint::Penultimate => out.penult,
        TapPoint::Logits => out.logits,
    })
}

/// Parameter and serialized-size accounting.
pub fn count_parameters<F: Scalar>(model: &dyn ImageClassifier<F>) -> ModelComplexityReport {
    let mut total = 0usize;
    let mut trainable = 0usize;
    for p in model.params() {
        total += p.len();
        if p.trainable {
            trainable += p.len();
        }
    }
    let serialized_size_bytes = crate::checkpoint::encode_to_vec(model, &[]).map_or(0, |v| v.len());
    ModelComplexityReport { total_parameters: total, trainable_parameters: trainable, serialized_size_bytes }
}

/// Exclude the first `depth` layer groups from gradient updates. Idempotent;
/// calling with a smaller depth re-enables later groups. The classifier head
/// stays trainable.
pub fn freeze_prefix<F: Scalar>(model: &mut dyn ImageClassifier<F>, depth: usize) -> Result<()> {
    let groups = model.layer_group_names().len();
    if depth > groups {
        return Err(Error::config(format!(
            "freeze depth {depth} exceeds {groups} layer groups"
        )));
    }
    model.apply_prefix_freeze(depth);
    Ok(())
}
