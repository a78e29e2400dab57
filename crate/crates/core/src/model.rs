//! End-to-end model: features, enhancement, global matching, propagation,
//! optional 1/4 refinement and convex upsampling.

use gmflow_tensor::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::error::{FlowError, Result, StageContext};
use crate::matching::{self, OCCLUSION_ALPHA, OCCLUSION_BETA};
use crate::params::{Bound, ParamStore};
use crate::refine::{self, PropagationConfig, RefineConfig};
use crate::transformer;
use crate::types::{FlowField, ImagePair, OcclusionMask};

/// Architecture hyper-parameters stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub num_blocks: usize,
    /// Windows per axis at 1/8.
    pub splits: usize,
    pub refine: bool,
    /// Windows per axis at 1/4.
    pub refine_splits: usize,
    pub refine_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            num_blocks: 4,
            splits: 2,
            refine: false,
            refine_splits: 8,
            refine_radius: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(FlowError::config(format!(
                "feature dimension must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if self.splits == 0 || (self.refine && (self.refine_splits == 0 || self.refine_radius == 0)) {
            return Err(FlowError::config(
                "window splits and refinement radius must be positive",
            ));
        }
        Ok(())
    }

    /// Side multiple every input image must satisfy.
    pub fn image_multiple(&self) -> usize {
        let coarse = 8 * 2 * self.splits;
        if self.refine {
            coarse.max(4 * 2 * self.refine_splits)
        } else {
            coarse
        }
    }

    pub fn upsample_factor(&self) -> usize {
        if self.refine {
            4
        } else {
            8
        }
    }

    /// Number of full-resolution predictions supervised by the loss.
    pub fn num_predictions(&self) -> usize {
        if self.refine {
            2
        } else {
            1
        }
    }

    fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            num_blocks: self.num_blocks,
            splits: self.refine_splits,
            radius: self.refine_radius,
            propagation: PropagationConfig::Local(3),
        }
    }
}

/// Per-call switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub propagate: bool,
    pub bidirectional: bool,
    pub occlusion_alpha: f64,
    pub occlusion_beta: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            propagate: true,
            bidirectional: false,
            occlusion_alpha: OCCLUSION_ALPHA,
            occlusion_beta: OCCLUSION_BETA,
        }
    }
}

/// All learnable parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> ModelWeights<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init(&mut params, config.dim, &mut rng);
        transformer::init(&mut params, config.dim, config.num_blocks, &mut rng);
        refine::init_upsampler(&mut params, config.dim, config.upsample_factor(), &mut rng);
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    /// Flow at the working scales, coarse to fine (1/8, then 1/4).
    pub coarse: Vec<Var>,
    /// Full-resolution predictions, coarse to fine; the last is the output.
    pub predictions: Vec<Var>,
    /// Full-resolution backward flow.
    pub backward: Option<Var>,
}

/// Builds the forward pass on `[3, H, W]` frame nodes.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frame1: Var,
    frame2: Var,
    opts: &ForwardOptions,
) -> Result<GraphOutput> {
    cfg.validate()?;
    let shape = g.shape(frame1).to_vec();
    if shape.len() != 3 || shape[0] != 3 || g.shape(frame2) != shape.as_slice() {
        return Err(FlowError::config(format!(
            "frames must be equal [3, H, W] tensors, got {:?} and {:?}",
            shape,
            g.shape(frame2)
        )));
    }
    backbone::check_image_dims(shape[1], shape[2], cfg.image_multiple())?;
    let scales: &[usize] = if cfg.refine { &[8, 4] } else { &[8] };
    let feats = backbone::features(g, p, frame1, frame2, scales).stage("backbone")?;

    let (f1, f2) = feats[0];
    let (h8, w8) = (g.shape(f1)[0], g.shape(f1)[1]);
    let pos8 = backbone::positional_encoding::<T>(h8, w8, cfg.dim)?;
    let (e1, e2) = transformer::enhance(g, p, f1, f2, &pos8, cfg.num_blocks, cfg.splits).stage("transformer")?;

    let (mut v8, corr) = matching::global_match(g, e1, e2).stage("matching")?;
    if opts.propagate {
        v8 = refine::propagate(g, e1, v8, PropagationConfig::Global).stage("propagation")?;
    }

    let backward = if opts.bidirectional {
        let mut b = matching::backward_from_correlation(g, corr, h8, w8).stage("matching")?;
        if opts.propagate {
            b = refine::propagate(g, e2, b, PropagationConfig::Global).stage("propagation")?;
        }
        Some(if cfg.refine {
            refine::upsample_bilinear(g, b, 8).stage("upsampling")?
        } else {
            refine::convex_upsample_var(g, p, b, e2, 8).stage("upsampling")?
        })
    } else {
        None
    };

    if !cfg.refine {
        let full = refine::convex_upsample_var(g, p, v8, e1, 8).stage("upsampling")?;
        return Ok(GraphOutput {
            coarse: vec![v8],
            predictions: vec![full],
            backward,
        });
    }

    let (q1, q2) = feats[1];
    let (h4, w4) = (g.shape(q1)[0], g.shape(q1)[1]);
    let pos4 = backbone::positional_encoding::<T>(h4, w4, cfg.dim)?;
    let rcfg = cfg.refine_config();
    let refined = if opts.propagate {
        refine::refine_var(g, p, q1, q2, v8, &pos4, &rcfg)
    } else {
        refine_without_propagation(g, p, q1, q2, v8, &pos4, &rcfg)
    }
    .stage("refinement")?;
    let intermediate = refine::upsample_bilinear(g, v8, 8).stage("upsampling")?;
    let full = refine::convex_upsample_var(g, p, refined.flow, refined.feature, 4).stage("upsampling")?;
    Ok(GraphOutput {
        coarse: vec![v8, refined.flow],
        predictions: vec![intermediate, full],
        backward,
    })
}

fn refine_without_propagation<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    f1: Var,
    f2: Var,
    coarse: Var,
    pos: &Tensor<T>,
    cfg: &RefineConfig,
) -> Result<refine::Refined> {
    let up = refine::upsample_bilinear(g, coarse, 2)?;
    let f2w = refine::warp_var(g, f2, up)?;
    let (e1, e2) = transformer::enhance(g, p, f1, f2w, pos, cfg.num_blocks, cfg.splits)?;
    let window = matching::LocalWindow::new(g.shape(e1)[0], g.shape(e1)[1], cfg.radius, None)?;
    let residual = matching::local_match(g, e1, e2, &window)?;
    let flow = g.add(up, residual)?;
    Ok(refine::Refined { flow, feature: e1 })
}

/// Inference result.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput<T> {
    /// Flow at 1/8 (and 1/4 with refinement), coarse to fine.
    pub coarse: Vec<FlowField<T>>,
    /// Full-resolution predictions, coarse to fine.
    pub predictions: Vec<FlowField<T>>,
    pub flow: FlowField<T>,
    pub backward: Option<FlowField<T>>,
    pub occlusion: Option<OcclusionMask>,
}

/// Runs the model on one image pair.
pub fn gmflow_forward<T: Real>(
    images: &ImagePair<T>,
    weights: &ModelWeights<T>,
    opts: &ForwardOptions,
) -> Result<FlowOutput<T>> {
    let mut g = Graph::new();
    let p = weights.params.bind(&mut g, false);
    let f1 = g.constant(images.frame1.clone());
    let f2 = g.constant(images.frame2.clone());
    let out = forward_graph(&mut g, &p, &weights.config, f1, f2, opts)?;
    let field = |v: Var, scale: usize| FlowField::new(g.value(v).clone(), scale);
    let coarse = out
        .coarse
        .iter()
        .zip([8, 4])
        .map(|(&v, s)| field(v, s))
        .collect::<Result<Vec<_>>>()?;
    let predictions = out
        .predictions
        .iter()
        .map(|&v| field(v, 1))
        .collect::<Result<Vec<_>>>()?;
    let flow = predictions.last().cloned().expect("at least one prediction");
    let backward = out.backward.map(|v| field(v, 1)).transpose()?;
    let occlusion = match &backward {
        Some(b) => Some(
            matching::occlusion_from_fb_check(&flow, b, opts.occlusion_alpha, opts.occlusion_beta)
                .stage("occlusion")?,
        ),
        None => None,
    };
    Ok(FlowOutput {
        coarse,
        predictions,
        flow,
        backward,
        occlusion,
    })
}
