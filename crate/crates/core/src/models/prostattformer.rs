use super::{BoundParams, ModelConfig, ModelError, ModelParams, ParamRole};
use crate::heatmap::{normalize, GridSpec, Heatmap, HeatmapError, Norm};
use crate::telemetry::FeatureGrid;
use crate::tensor::{mhsa, Graph, MhsaParams, Var};
use serde::{Deserialize, Serialize};

/// Transformer encoder over frozen patch features with a per-token linear
/// decoder. Blocks are pre-norm: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`
/// with a GELU hidden layer of width `mlp_ratio · dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProstAttFormerConfig {
    pub grid: GridSpec,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ProstAttFormerConfig {
    /// D = 384, 12 layers, 8 heads, MLP ratio 4.
    pub fn new(grid: GridSpec) -> Self {
        ProstAttFormerConfig {
            grid,
            dim: 384,
            layers: 12,
            heads: 8,
            mlp_ratio: 4,
        }
    }

    pub fn for_level(level: &str) -> Option<Self> {
        GridSpec::for_level(level).map(Self::new)
    }

    pub fn tokens(&self) -> usize {
        self.grid.cells()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.grid.cells() == 0 {
            return Err(ModelError::InvalidConfig("mlp_ratio and grid must be positive".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>, ParamRole)> {
        let (d, h) = (self.dim, self.dim * self.mlp_ratio);
        let mut s = vec![("pos".to_string(), vec![self.tokens(), d], ParamRole::Position)];
        for l in 0..self.layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            s.push((p("ln1.gamma"), vec![d], ParamRole::NormScale));
            s.push((p("ln1.beta"), vec![d], ParamRole::NormShift));
            for proj in ["q", "k", "v", "o"] {
                s.push((p(&format!("attn.w{proj}")), vec![d, d], ParamRole::Weight));
                s.push((p(&format!("attn.b{proj}")), vec![d], ParamRole::Bias));
            }
            s.push((p("ln2.gamma"), vec![d], ParamRole::NormScale));
            s.push((p("ln2.beta"), vec![d], ParamRole::NormShift));
            s.push((p("mlp.w1"), vec![d, h], ParamRole::Weight));
            s.push((p("mlp.b1"), vec![h], ParamRole::Bias));
            s.push((p("mlp.w2"), vec![h, d], ParamRole::Weight));
            s.push((p("mlp.b2"), vec![d], ParamRole::Bias));
        }
        s.push(("norm.gamma".into(), vec![d], ParamRole::NormScale));
        s.push(("norm.beta".into(), vec![d], ParamRole::NormShift));
        s.push(("decoder.w".into(), vec![d, 1], ParamRole::Weight));
        s.push(("decoder.b".into(), vec![1], ParamRole::Bias));
        s
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams, ModelError> {
        self.validate()?;
        Ok(ModelParams::init(
            ModelConfig::Prostattformer(self.clone()),
            self.shapes(),
            seed,
        ))
    }
}

/// Number of learnable scalars for `config`.
pub fn prostattformer_param_count(config: &ProstAttFormerConfig) -> usize {
    config
        .shapes()
        .iter()
        .map(|(_, d, _)| d.iter().product::<usize>())
        .sum()
}

fn feature_tokens(features: &FeatureGrid, config: &ProstAttFormerConfig) -> Result<Vec<f64>, ModelError> {
    if features.grid_h() != config.grid.rows || features.grid_w() != config.grid.cols || features.dim() != config.dim {
        return Err(ModelError::ShapeMismatch(format!(
            "features {}x{}x{} vs model grid {}x{} dim {}",
            features.grid_h(),
            features.grid_w(),
            features.dim(),
            config.grid.rows,
            config.grid.cols,
            config.dim
        )));
    }
    Ok(features.data().iter().map(|&v| v as f64).collect())
}

/// Records the forward pass on `g` and returns the raw per-token scores `[N, 1]`.
pub fn build_prostattformer(
    g: &mut Graph,
    p: &BoundParams,
    config: &ProstAttFormerConfig,
    features: &FeatureGrid,
) -> Result<Var, ModelError> {
    let tokens = feature_tokens(features, config)?;
    let (n, d) = (config.tokens(), config.dim);
    let x = g.constant(&[n, d], tokens)?;
    let mut z = g.add(x, p.var("pos")?)?;
    for l in 0..config.layers {
        let v = |name: &str| p.var(&format!("blocks.{l}.{name}"));
        let h = g.layer_norm(z, v("ln1.gamma")?, v("ln1.beta")?)?;
        let attn = MhsaParams {
            wq: v("attn.wq")?,
            bq: v("attn.bq")?,
            wk: v("attn.wk")?,
            bk: v("attn.bk")?,
            wv: v("attn.wv")?,
            bv: v("attn.bv")?,
            wo: v("attn.wo")?,
            bo: v("attn.bo")?,
        };
        let a = mhsa(g, h, &attn, config.heads)?;
        z = g.add(z, a)?;
        let h = g.layer_norm(z, v("ln2.gamma")?, v("ln2.beta")?)?;
        let h = g.linear(h, v("mlp.w1")?, v("mlp.b1")?)?;
        let h = g.gelu(h);
        let h = g.linear(h, v("mlp.w2")?, v("mlp.b2")?)?;
        z = g.add(z, h)?;
    }
    let z = g.layer_norm(z, p.var("norm.gamma")?, p.var("norm.beta")?)?;
    Ok(g.linear(z, p.var("decoder.w")?, p.var("decoder.b")?)?)
}

/// A predicted attention map. `degenerate` marks a constant raw prediction,
/// reported as an all-zero map because it cannot be min-max normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMap {
    pub heatmap: Heatmap,
    pub raw: Vec<f64>,
    pub degenerate: bool,
}

fn config_of(params: &ModelParams) -> Result<&ProstAttFormerConfig, ModelError> {
    match &params.config {
        ModelConfig::Prostattformer(c) => Ok(c),
        _ => Err(ModelError::InvalidConfig(
            "parameters belong to a different model".into(),
        )),
    }
}

/// Predicts a min-max normalized attention map on the model's grid.
pub fn prostattformer_forward(features: &FeatureGrid, params: &ModelParams) -> Result<PredictedMap, ModelError> {
    let config = config_of(params)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let scores = build_prostattformer(&mut g, &bound, config, features)?;
    let raw = g.value(scores).to_vec();
    let grid = config.grid.clone();
    // scores can be negative; shifting by the minimum leaves min-max unchanged
    let shifted = {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        Heatmap::new(grid.clone(), raw.iter().map(|v| v - lo).collect(), Norm::Raw)?
    };
    match normalize(&shifted, Norm::MinMax) {
        Ok(heatmap) => Ok(PredictedMap {
            heatmap,
            raw,
            degenerate: false,
        }),
        Err(HeatmapError::DegenerateMap(_)) => Ok(PredictedMap {
            heatmap: Heatmap::zeros(grid).with_norm(Norm::MinMax),
            raw,
            degenerate: true,
        }),
        Err(e) => Err(e.into()),
    }
}
