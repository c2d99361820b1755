use super::{BoundParams, ModelConfig, ModelError, ModelParams, ParamRole};
use crate::heatmap::{
    default_mag_bins, magnification_stack, resample, temporal_stack, GridSpec, Heatmap, MagBin, DEFAULT_TIME_FRACTIONS,
};
use crate::telemetry::{FeatureGrid, Session};
use crate::tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

const POOLED: usize = 16;
const STACK_DEPTH: usize = 4;

/// Which heatmap branches feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    TemporalOnly,
    MagnificationOnly,
    #[default]
    Both,
}

impl AblationMode {
    pub fn uses_temporal(self) -> bool {
        matches!(self, AblationMode::TemporalOnly | AblationMode::Both)
    }

    pub fn uses_magnification(self) -> bool {
        matches!(self, AblationMode::MagnificationOnly | AblationMode::Both)
    }
}

/// Three 1×1 conv encoders (features, temporal stack, magnification stack),
/// concatenated and decoded by pool → conv → pool → fc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseNetConfig {
    pub grid: GridSpec,
    pub dim: usize,
    pub n_classes: usize,
    pub channels: usize,
    #[serde(default)]
    pub mode: AblationMode,
}

impl ExpertiseNetConfig {
    /// 60×60 grid, 16 channels per encoder, both heatmap branches.
    pub fn new(dim: usize, n_classes: usize) -> Self {
        ExpertiseNetConfig {
            grid: GridSpec::for_level("20x").expect("known level"),
            dim,
            n_classes,
            channels: 16,
            mode: AblationMode::Both,
        }
    }

    pub fn branches(&self) -> usize {
        1 + self.mode.uses_temporal() as usize + self.mode.uses_magnification() as usize
    }

    /// Channels entering the decoder after concatenation.
    pub fn concat_channels(&self) -> usize {
        self.branches() * self.channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(2..=3).contains(&self.n_classes) {
            return Err(ModelError::InvalidConfig(format!(
                "n_classes must be 2 or 3, got {}",
                self.n_classes
            )));
        }
        if self.dim == 0 || self.channels == 0 {
            return Err(ModelError::InvalidConfig("dim and channels must be positive".into()));
        }
        if self.grid.rows < 3 || self.grid.cols < 3 {
            return Err(ModelError::InvalidConfig(
                "grid must be at least 3x3 for the 3x3 pooling".into(),
            ));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>, ParamRole)> {
        let c = self.channels;
        let mut s = vec![
            ("wsi_enc.w".to_string(), vec![self.dim, c], ParamRole::Weight),
            ("wsi_enc.b".to_string(), vec![c], ParamRole::Bias),
        ];
        if self.mode.uses_temporal() {
            s.push(("temporal_enc.w".into(), vec![STACK_DEPTH, c], ParamRole::Weight));
            s.push(("temporal_enc.b".into(), vec![c], ParamRole::Bias));
        }
        if self.mode.uses_magnification() {
            s.push(("mag_enc.w".into(), vec![STACK_DEPTH, c], ParamRole::Weight));
            s.push(("mag_enc.b".into(), vec![c], ParamRole::Bias));
        }
        s.push((
            "decoder.conv.w".into(),
            vec![self.concat_channels(), 1],
            ParamRole::Weight,
        ));
        s.push(("decoder.conv.b".into(), vec![1], ParamRole::Bias));
        s.push((
            "decoder.fc.w".into(),
            vec![POOLED * POOLED, self.n_classes],
            ParamRole::Weight,
        ));
        s.push(("decoder.fc.b".into(), vec![self.n_classes], ParamRole::Bias));
        s
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams, ModelError> {
        self.validate()?;
        Ok(ModelParams::init(
            ModelConfig::Expertisenet(self.clone()),
            self.shapes(),
            seed,
        ))
    }
}

/// Same config with the unused heatmap branch removed.
pub fn ablation_variant(config: &ExpertiseNetConfig, mode: AblationMode) -> ExpertiseNetConfig {
    ExpertiseNetConfig { mode, ..config.clone() }
}

/// Four maps on one grid, stored channels-first.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    grid: GridSpec,
    data: Vec<f64>,
}

impl MapStack {
    pub fn new(maps: &[Heatmap]) -> Result<Self, ModelError> {
        if maps.len() != STACK_DEPTH {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {STACK_DEPTH} maps, got {}",
                maps.len()
            )));
        }
        let grid = maps[0].grid().clone();
        if maps.iter().any(|m| !m.grid().same_shape(&grid)) {
            return Err(ModelError::ShapeMismatch("maps differ in grid".into()));
        }
        let data = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
        Ok(MapStack { grid, data })
    }

    pub fn zeros(grid: &GridSpec) -> Self {
        MapStack {
            grid: grid.clone(),
            data: vec![0.0; STACK_DEPTH * grid.cells()],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        MapStack {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Cumulative dwell maps at 25/50/75/100 % of the session, each scaled
    /// to a mean of 1 per cell so inputs are comparable across sessions.
    pub fn temporal(session: &Session, grid: &GridSpec) -> Result<Self, ModelError> {
        let maps = temporal_stack(session, grid, &DEFAULT_TIME_FRACTIONS)?;
        let cells = grid.cells() as f64;
        let scaled: Vec<Heatmap> = maps
            .iter()
            .map(|m| {
                let s = m.sum();
                if s > 0.0 {
                    m.scaled(cells / s)
                } else {
                    m.clone()
                }
            })
            .collect();
        Self::new(&scaled)
    }

    /// Per-magnification dwell maps resampled onto `grid`. All four share
    /// one scale (total session mass) so the split across levels survives.
    pub fn magnification(session: &Session, bins: &[MagBin], grid: &GridSpec) -> Result<Self, ModelError> {
        let stack = magnification_stack(session, bins)?;
        let maps: Vec<Heatmap> = stack.maps.iter().map(|b| resample(&b.heatmap, grid)).collect();
        let total: f64 = maps.iter().map(Heatmap::sum).sum();
        let factor = if total > 0.0 { grid.cells() as f64 / total } else { 1.0 };
        let scaled: Vec<Heatmap> = maps.iter().map(|m| m.scaled(factor)).collect();
        Self::new(&scaled)
    }
}

/// Network inputs for one session, all on the config grid and channels-first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertiseTensors {
    pub features: Vec<f64>,
    pub temporal: MapStack,
    pub magnification: MapStack,
}

impl ExpertiseTensors {
    pub fn new(features: &FeatureGrid, temporal: MapStack, magnification: MapStack) -> Self {
        ExpertiseTensors {
            features: channels_first(features),
            temporal,
            magnification,
        }
    }

    /// Builds both stacks from a session using the default magnification bins.
    pub fn from_session(session: &Session, features: &FeatureGrid, grid: &GridSpec) -> Result<Self, ModelError> {
        let temporal = MapStack::temporal(session, grid)?;
        let magnification = MapStack::magnification(session, &default_mag_bins(), grid)?;
        Ok(Self::new(features, temporal, magnification))
    }

    /// Applies one of the eight symmetries of the square to every channel:
    /// bit 0 flips columns, bit 1 flips rows, bit 2 transposes (square grids
    /// only; ignored otherwise).
    pub fn dihedral(&self, op: u8) -> Self {
        let grid = self.temporal.grid.clone();
        let (h, w) = (grid.rows, grid.cols);
        let transpose = op & 4 != 0 && h == w;
        let map = |src: &[f64]| -> Vec<f64> {
            let n = h * w;
            let mut out = vec![0.0; src.len()];
            for (plane_in, plane_out) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                for r in 0..h {
                    for c in 0..w {
                        let (mut rr, mut cc) = (r, c);
                        if transpose {
                            (rr, cc) = (cc, rr);
                        }
                        if op & 1 != 0 {
                            cc = w - 1 - cc;
                        }
                        if op & 2 != 0 {
                            rr = h - 1 - rr;
                        }
                        plane_out[r * w + c] = plane_in[rr * w + cc];
                    }
                }
            }
            out
        };
        ExpertiseTensors {
            features: map(&self.features),
            temporal: MapStack {
                grid: grid.clone(),
                data: map(&self.temporal.data),
            },
            magnification: MapStack {
                grid,
                data: map(&self.magnification.data),
            },
        }
    }
}

/// `[h, w, d]` row-major patches → `[d, h, w]`.
fn channels_first(f: &FeatureGrid) -> Vec<f64> {
    let (h, w, d) = (f.grid_h(), f.grid_w(), f.dim());
    let src = f.data();
    let mut out = vec![0.0; h * w * d];
    for p in 0..h * w {
        for c in 0..d {
            out[c * h * w + p] = src[p * d + c] as f64;
        }
    }
    out
}

fn config_of(params: &ModelParams) -> Result<&ExpertiseNetConfig, ModelError> {
    match &params.config {
        ModelConfig::Expertisenet(c) => Ok(c),
        _ => Err(ModelError::InvalidConfig(
            "parameters belong to a different model".into(),
        )),
    }
}

/// Records the forward pass on `g`; returns logits `[1, n_classes]`.
pub fn build_expertisenet(
    g: &mut Graph,
    p: &BoundParams,
    config: &ExpertiseNetConfig,
    x: &ExpertiseTensors,
) -> Result<Var, ModelError> {
    let (h, w) = (config.grid.rows, config.grid.cols);
    let cells = h * w;
    if x.features.len() != config.dim * cells {
        return Err(ModelError::ShapeMismatch(format!(
            "features hold {} values, expected {}x{}x{}",
            x.features.len(),
            config.dim,
            h,
            w
        )));
    }
    for (name, stack) in [("temporal", &x.temporal), ("magnification", &x.magnification)] {
        if !stack.grid().same_shape(&config.grid) {
            return Err(ModelError::ShapeMismatch(format!(
                "{name} stack is not on the {h}x{w} grid"
            )));
        }
    }

    let mut encoded = Vec::with_capacity(3);
    let feats = g.constant(&[config.dim, h, w], x.features.clone())?;
    let e = g.conv1x1(feats, p.var("wsi_enc.w")?, p.var("wsi_enc.b")?)?;
    encoded.push(g.relu(e));
    if config.mode.uses_temporal() {
        let t = g.constant(&[STACK_DEPTH, h, w], x.temporal.data().to_vec())?;
        let e = g.conv1x1(t, p.var("temporal_enc.w")?, p.var("temporal_enc.b")?)?;
        encoded.push(g.relu(e));
    }
    if config.mode.uses_magnification() {
        let m = g.constant(&[STACK_DEPTH, h, w], x.magnification.data().to_vec())?;
        let e = g.conv1x1(m, p.var("mag_enc.w")?, p.var("mag_enc.b")?)?;
        encoded.push(g.relu(e));
    }
    let volume = g.concat_rows(&encoded)?;
    let pooled = g.avg_pool2d(volume, 3, 2)?;
    let d = g.conv1x1(pooled, p.var("decoder.conv.w")?, p.var("decoder.conv.b")?)?;
    let d = g.adaptive_avg_pool(d, POOLED, POOLED)?;
    let flat = g.reshape(d, &[1, POOLED * POOLED])?;
    Ok(g.linear(flat, p.var("decoder.fc.w")?, p.var("decoder.fc.b")?)?)
}

/// Class logits for one session.
pub fn expertisenet_forward(
    features: &FeatureGrid,
    temporal: &MapStack,
    magnification: &MapStack,
    params: &ModelParams,
) -> Result<Vec<f64>, ModelError> {
    let config = config_of(params)?;
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
    let x = ExpertiseTensors::new(features, temporal.clone(), magnification.clone());
    forward_tensors(&x, params)
}

pub(crate) fn forward_tensors(x: &ExpertiseTensors, params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    let config = config_of(params)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let logits = build_expertisenet(&mut g, &bound, config, x)?;
    Ok(g.value(logits).to_vec())
}
