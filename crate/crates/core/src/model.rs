//! Configured networks: embedding, a stack of blocks (optionally a U-shape
//! over farthest-point-sampled levels) and a readout.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{make_sphere_grid, GridMethod, SphereGrid};
use crate::invariants::Regime;
use crate::layers::{
    embed, ConvNextBlock, Forward, InputSpec, InvariantReadout, LevelGeometry, LevelVars, Linear,
    VectorReadout, EXPANSION,
};
use crate::pointcloud::{
    build_neighbors, farthest_point_sample, interpolation_plan, InterpolationPlan, NeighborMode,
    PointCloud,
};

/// Neighbors used when interpolating features back to a finer level.
pub const UPSAMPLE_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Readout {
    InvariantGlobal,
    InvariantPerPoint,
    Vector,
}

impl Readout {
    pub const ALL: [Readout; 3] = [Readout::InvariantGlobal, Readout::InvariantPerPoint, Readout::Vector];

    pub fn name(self) -> &'static str {
        match self {
            Readout::InvariantGlobal => "invariant_global",
            Readout::InvariantPerPoint => "invariant_perpoint",
            Readout::Vector => "vector",
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Readout::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown readout '{s}'")))
    }
}

/// The largest group a configured model is equivariant to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symmetry {
    Se3,
    So3,
    T3,
    None,
}

impl Symmetry {
    pub fn has_rotation(self) -> bool {
        matches!(self, Symmetry::Se3 | Symmetry::So3)
    }

    pub fn has_translation(self) -> bool {
        matches!(self, Symmetry::Se3 | Symmetry::T3)
    }

    pub fn from_parts(rotation: bool, translation: bool) -> Self {
        match (rotation, translation) {
            (true, true) => Symmetry::Se3,
            (true, false) => Symmetry::So3,
            (false, true) => Symmetry::T3,
            (false, false) => Symmetry::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Symmetry::Se3 => "SE3",
            Symmetry::So3 => "SO3",
            Symmetry::T3 => "T3",
            Symmetry::None => "none",
        }
    }
}

impl fmt::Display for Symmetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub regime: Regime,
    /// Total number of blocks.
    pub layers: usize,
    pub channels: usize,
    /// Hidden width of the block MLPs; `4 * channels` when unset.
    pub inflated_channels: Option<usize>,
    /// Number of sphere directions; 0 for ℝ³ regimes.
    pub fiber_size: usize,
    pub grid_method: GridMethod,
    pub input: InputSpec,
    pub readout: Readout,
    /// Output width of invariant readouts (targets or class count).
    pub outputs: usize,
    /// FPS ratios per level relative to the input; empty for single scale.
    pub scales: Vec<f64>,
    pub neighbors: usize,
    /// Length unit dividing geometric kernel inputs.
    pub length_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Se3R3S2,
            layers: 7,
            channels: 256,
            inflated_channels: None,
            fiber_size: 8,
            grid_method: GridMethod::Fibonacci,
            input: InputSpec::default(),
            readout: Readout::InvariantGlobal,
            outputs: 1,
            scales: Vec::new(),
            neighbors: 16,
            length_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.inflated_channels.unwrap_or(EXPANSION * self.channels)
    }

    /// Every violated constraint, empty when the configuration is buildable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let r3 = !self.regime.has_fiber();
        if r3 && self.fiber_size != 0 {
            out.push(format!("fiber_size must be 0 for regime {}", self.regime));
        }
        if !r3 && self.fiber_size == 0 {
            out.push(format!("fiber_size must be positive for regime {}", self.regime));
        }
        if self.readout == Readout::Vector && self.fiber_size < 2 {
            out.push("readout=vector requires fiber_size >= 2".into());
        }
        if self.input.needs_fiber() && self.fiber_size < 2 {
            out.push(format!(
                "inputs {:?} need fiber_size >= 2; use the *_as_scalars variants",
                self.input.flag_names()
            ));
        }
        if (self.input.aux_as_scalars || self.input.aux_as_vectors) && self.input.aux_vectors == 0 {
            out.push("auxiliary inputs enabled but aux_vectors = 0".into());
        }
        if self.layers == 0 {
            out.push("layers must be positive".into());
        }
        if self.channels == 0 || self.hidden() == 0 {
            out.push("channels must be positive".into());
        }
        if self.outputs == 0 && self.readout != Readout::Vector {
            out.push("outputs must be positive".into());
        }
        if self.neighbors == 0 {
            out.push("neighbors must be positive".into());
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            out.push("length_scale must be positive".into());
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            out.push("scales must lie in (0, 1]".into());
        }
        if self.scales.windows(2).any(|w| w[1] > w[0]) {
            out.push("scales must be non-increasing".into());
        }
        let levels = self.levels();
        if levels > 1 && self.readout != Readout::InvariantGlobal && self.layers < 2 * levels - 1 {
            out.push(format!(
                "a U-shape over {levels} levels needs at least {} layers",
                2 * levels - 1
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn levels(&self) -> usize {
        self.scales.len().max(1)
    }

    /// Whether the network decodes back to the input resolution.
    pub fn is_u_shape(&self) -> bool {
        self.levels() > 1 && self.readout != Readout::InvariantGlobal
    }

    /// Blocks per level: `(encoder, decoder)`. Every non-coarsest level has
    /// one encoder block (and one decoder block in a U-shape); the coarsest
    /// level receives the remainder, at least one.
    pub fn block_plan(&self) -> Vec<(usize, usize)> {
        let s = self.levels();
        if s == 1 {
            return vec![(self.layers, 0)];
        }
        let dec = usize::from(self.is_u_shape());
        let used = (s - 1) * (1 + dec);
        let mut plan = vec![(1, dec); s - 1];
        plan.push((self.layers.saturating_sub(used).max(1), 0));
        plan
    }

    pub fn grid(&self) -> Result<SphereGrid> {
        if self.fiber_size == 0 {
            Ok(SphereGrid::trivial())
        } else {
            make_sphere_grid(self.fiber_size, self.grid_method)
        }
    }

    /// Derived from the regime and which inputs break which symmetry:
    /// raw coordinates break both rotations and translations, coordinates
    /// projected on the fiber break translations, and vector components
    /// read as scalars break rotations. The reference frame transforms with
    /// the input and breaks nothing.
    pub fn effective_equivariance(&self) -> Symmetry {
        let base = match self.regime {
            Regime::Se3R3 | Regime::Se3R3S2 => Symmetry::Se3,
            Regime::T3R3 => Symmetry::T3,
            Regime::NoneR3 | Regime::NoneR3S2 => Symmetry::None,
        };
        let i = &self.input;
        let rotation = base.has_rotation() && !i.coords_as_scalars && !i.aux_as_scalars;
        let translation = base.has_translation() && !i.coords_as_scalars && !i.coords_as_vectors;
        Symmetry::from_parts(rotation, translation)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let lift = Linear::param_count(self.input.channels(), c, true);
        let blocks = self.block_plan().iter().map(|(e, d)| e + d).sum::<usize>()
            * ConvNextBlock::param_count(self.regime, c, self.hidden());
        let fuse = if self.is_u_shape() {
            (self.levels() - 1) * Linear::param_count(2 * c, c, true)
        } else {
            0
        };
        let readout = match self.readout {
            Readout::Vector => c,
            _ => Linear::param_count(c, self.outputs, true),
        };
        lift + blocks + fuse + readout
    }
}

#[derive(Debug, Clone)]
enum Head {
    Invariant(InvariantReadout),
    Vector(VectorReadout),
}

#[derive(Debug, Clone)]
struct Level {
    encoder: Vec<ConvNextBlock>,
    decoder: Vec<ConvNextBlock>,
    fuse: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    lift: Linear,
    levels: Vec<Level>,
    head: Head,
}

/// Parameter-independent inputs of a forward pass: embedding, graphs and
/// resampling plans for every level. Computed once per cloud.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: Tensor,
    pub levels: Vec<LevelGeometry>,
    /// Indices into level `s` selecting level `s + 1`.
    pub down: Vec<Vec<usize>>,
    /// Interpolation from level `s + 1` back to level `s`.
    pub up: Vec<InterpolationPlan>,
    /// Sample index per point at the readout level.
    pub groups: Vec<usize>,
    pub n_groups: usize,
    pub grid: SphereGrid,
}

/// Builds a model; initialization is deterministic in `config.seed`.
pub fn build(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    let c = config.channels;
    let lift = Linear::new(&mut params, "lift", config.input.channels(), c, true, &mut rng);
    // The lift bias is the only signal of a model without input features;
    // a random start keeps such models from being constant at init.
    let lift_bias = lift.bias.expect("lift has bias");
    *params.get_mut(lift_bias) = crate::layers::normal_tensor(&mut rng, &[c], 1.0);
    let mut index = 0;
    let mut levels = Vec::new();
    let plan = config.block_plan();
    for (s, &(enc, _)) in plan.iter().enumerate() {
        let mut encoder = Vec::new();
        for b in 0..enc {
            encoder.push(ConvNextBlock::new(
                &mut params,
                &format!("level{s}.encoder{b}"),
                index,
                config.regime,
                c,
                config.hidden(),
                &mut rng,
            ));
            index += 1;
        }
        levels.push(Level {
            encoder,
            decoder: Vec::new(),
            fuse: None,
        });
    }
    // Decoder blocks run coarse to fine after the encoder.
    for s in (0..plan.len()).rev() {
        if plan[s].1 == 0 {
            continue;
        }
        levels[s].fuse = Some(Linear::new(
            &mut params,
            &format!("level{s}.fuse"),
            2 * c,
            c,
            true,
            &mut rng,
        ));
        for b in 0..plan[s].1 {
            let block = ConvNextBlock::new(
                &mut params,
                &format!("level{s}.decoder{b}"),
                index,
                config.regime,
                c,
                config.hidden(),
                &mut rng,
            );
            levels[s].decoder.push(block);
            index += 1;
        }
    }
    let head = match config.readout {
        Readout::Vector => Head::Vector(VectorReadout::new(&mut params, "readout", c, &mut rng)),
        _ => Head::Invariant(InvariantReadout::new(&mut params, "readout", c, config.outputs, &mut rng)),
    };
    Ok(Model {
        config: config.clone(),
        params,
        lift,
        levels,
        head,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// The grid implied by the configuration.
    pub fn default_grid(&self) -> Result<SphereGrid> {
        self.config.grid()
    }

    pub fn prepare(&self, cloud: &PointCloud, grid: &SphereGrid) -> Result<Prepared> {
        let cfg = &self.config;
        let expected = cfg.fiber_size.max(1);
        if grid.len() != expected {
            return Err(Error::Precondition(format!(
                "model uses {expected} fiber directions, grid has {}",
                grid.len()
            )));
        }
        if cloud.is_empty() {
            return Err(Error::Precondition("empty point cloud".into()));
        }
        cloud.validate()?;
        let input = embed(cloud, grid, &cfg.input)?;
        let mut clouds = vec![cloud.clone()];
        let mut down = Vec::new();
        for s in 1..cfg.levels() {
            let prev = &clouds[s - 1];
            let ratio = (cfg.scales[s] / cfg.scales[s - 1]).min(1.0);
            let idx = farthest_point_sample(prev, ratio)?;
            clouds.push(prev.select(&idx));
            down.push(idx);
        }
        let mut levels = Vec::with_capacity(clouds.len());
        for c in &clouds {
            let graph = build_neighbors(c, NeighborMode::Knn(cfg.neighbors))?;
            levels.push(LevelGeometry::new(cfg.regime, c, &graph, grid, cfg.length_scale)?);
        }
        let mut up = Vec::new();
        if cfg.is_u_shape() {
            for s in 0..clouds.len() - 1 {
                up.push(interpolation_plan(&clouds[s + 1], &clouds[s], UPSAMPLE_NEIGHBORS)?);
            }
        }
        let readout_cloud = if cfg.is_u_shape() { &clouds[0] } else { clouds.last().expect("level") };
        let groups = readout_cloud.group_index();
        let n_groups = groups.last().map_or(0, |g| g + 1);
        Ok(Prepared {
            input,
            levels,
            down,
            up,
            groups,
            n_groups,
            grid: grid.clone(),
        })
    }

    /// Output shapes: `G x outputs` (global), `P x outputs` (per point),
    /// `P x 3` (vector).
    pub fn forward_prepared(&self, fw: &mut Forward, prep: &Prepared) -> Result<Var> {
        let x = fw.constant(prep.input.clone());
        self.forward_input(fw, x, prep)
    }

    /// As `forward_prepared` with the embedded input supplied as a variable
    /// shaped like `prep.input`.
    pub fn forward_input(&self, fw: &mut Forward, input: Var, prep: &Prepared) -> Result<Var> {
        let mut x = self.lift.forward(fw, input)?;
        let vars: Vec<LevelVars> = prep.levels.iter().map(|g| LevelVars::new(fw, g)).collect();
        let check = |fw: &Forward, v: Var, what: &str| -> Result<()> {
            if fw.tape.value(v).is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(what.to_string()))
            }
        };
        check(fw, x, "input lift")?;
        let mut skips = Vec::new();
        for (s, level) in self.levels.iter().enumerate() {
            if s > 0 {
                x = fw.tape.gather_rows(x, &prep.down[s - 1])?;
            }
            for block in &level.encoder {
                x = block.forward(fw, x, &prep.levels[s], &vars[s])?;
                check(fw, x, &format!("block {}", block.index))?;
            }
            skips.push(x);
        }
        if self.config.is_u_shape() {
            for s in (0..self.levels.len() - 1).rev() {
                let level = &self.levels[s];
                let plan = &prep.up[s];
                x = interpolate(fw, x, plan)?;
                let cat = fw.tape.concat(&[x, skips[s]], 2)?;
                x = level.fuse.as_ref().expect("decoder level has fuse").forward(fw, cat)?;
                for block in &level.decoder {
                    x = block.forward(fw, x, &prep.levels[s], &vars[s])?;
                    check(fw, x, &format!("block {}", block.index))?;
                }
            }
        }
        let out = match &self.head {
            Head::Invariant(h) => {
                let groups = (self.config.readout == Readout::InvariantGlobal)
                    .then_some((prep.groups.as_slice(), prep.n_groups));
                h.forward(fw, x, &prep.grid, groups)?
            }
            Head::Vector(h) => h.forward(fw, x, &prep.grid)?,
        };
        check(fw, out, "readout")?;
        Ok(out)
    }

    /// Inference on a cloud with the given grid.
    pub fn forward(&self, cloud: &PointCloud, grid: &SphereGrid) -> Result<Tensor> {
        let prep = self.prepare(cloud, grid)?;
        self.predict(&prep)
    }

    pub fn predict(&self, prep: &Prepared) -> Result<Tensor> {
        let mut fw = Forward::new(&self.params, false);
        let out = self.forward_prepared(&mut fw, prep)?;
        Ok(fw.tape.value(out).clone())
    }
}

/// Differentiable inverse-distance interpolation of `n_coarse x O x C`
/// features onto the fine level.
fn interpolate(fw: &mut Forward, coarse: Var, plan: &InterpolationPlan) -> Result<Var> {
    let rows = fw.tape.gather_rows(coarse, &plan.coarse_rows)?;
    let w = fw.constant(Tensor::new(vec![plan.weights.len(), 1, 1], plan.weights.clone())?);
    let rows = fw.tape.mul(rows, w)?;
    fw.tape.scatter_add(rows, &plan.fine_rows, plan.n_fine)
}
