use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregation::{Aggregation, AGG_EDGES};
use super::arch::DerivedArchitecture;
use super::cell::{CellKind, CellSpec};
use super::hypercell::{HyperCell, HyperLogits, HyperMasks, HyperSpec};
use super::ops::{ConvBlock, ConvLayer, Ctx, ParamBuilder};
use super::{AggOp, CellOp};
use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::sampling::{gumbel_softmax_rows, GumbelSampler};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Shape4, Var};

/// Downsampling of the stem; hyper-cells then halve the resolution three times.
pub const STEM_STRIDE: usize = 4;
pub const NETWORK_STRIDE: usize = 32;

/// Widths of every stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub stem: usize,
    /// Output width of each hyper-cell.
    pub hyper: [usize; 3],
    pub nodes: usize,
    pub agg_width: usize,
    pub num_classes: usize,
}

impl ChannelPlan {
    pub fn from_config(c: &SearchConfig) -> Self {
        Self {
            stem: c.stem_channels,
            hyper: [
                c.hyper_out_channels(0),
                c.hyper_out_channels(1),
                c.hyper_out_channels(2),
            ],
            nodes: c.nodes,
            agg_width: c.agg_width(),
            num_classes: c.dataset.num_classes,
        }
    }

    pub fn hyper_in(&self, s: usize) -> usize {
        if s == 0 {
            self.stem
        } else {
            self.hyper[s - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.stem > 0
            && self.nodes > 0
            && self.agg_width > 0
            && self.num_classes > 0
            && self.hyper.iter().all(|&c| c > 0 && c % self.nodes == 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed {
                kind: "channel plan",
                msg: format!("{self:?}"),
            })
        }
    }
}

/// Where an architecture mask applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSite {
    Depth(usize),
    /// Hyper-cell and cell index.
    Cell(usize, usize),
    Agg,
}

/// Masks for a relaxed forward pass of the whole network.
#[derive(Clone, Debug)]
pub struct NetMasks {
    pub hyper: Vec<HyperMasks>,
    pub agg: Var,
}

/// A segmentation network: either the relaxed super-network, which carries
/// every candidate and the architecture logits, or a derived discrete one.
#[derive(Clone, Debug)]
pub struct Network {
    pub plan: ChannelPlan,
    pub stem: Vec<ConvBlock>,
    pub hyper: Vec<HyperCell>,
    pub agg: Aggregation,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub agg_logits: Option<ParamId>,
    /// Candidate lists of the super-network; empty for derived networks.
    pub cell_ops: Vec<CellOp>,
    pub agg_ops: Vec<AggOp>,
}

fn build_stem(pb: &mut ParamBuilder<'_>, c: usize) -> Result<Vec<ConvBlock>> {
    let mut blocks = Vec::with_capacity(2);
    for (i, cin) in [3, c].into_iter().enumerate() {
        blocks.push(ConvBlock {
            conv: ConvLayer::Full {
                weight: pb.conv_weight(&format!("stem.b{i}.w"), c, cin, 3)?,
                stride: 2,
                dilation: 1,
            },
            norm: pb.norm(&format!("stem.b{i}.norm"), c)?,
        });
    }
    Ok(blocks)
}

fn build_head(pb: &mut ParamBuilder<'_>, plan: &ChannelPlan) -> Result<(ParamId, ParamId)> {
    Ok((
        pb.conv_weight("head.w", plan.num_classes, plan.agg_width * 3, 1)?,
        pb.bias("head.b", plan.num_classes)?,
    ))
}

impl Network {
    /// The relaxed super-network with deterministically initialized weights
    /// and zero architecture logits.
    pub fn supernet(config: &SearchConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let plan = ChannelPlan::from_config(config);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let stem = build_stem(&mut pb, plan.stem)?;
        let k = config.cell_ops.len();
        let all: Vec<(usize, CellOp)> = config.cell_ops.iter().copied().enumerate().collect();
        let mut hyper = Vec::with_capacity(3);
        for s in 0..3 {
            let spec = HyperSpec {
                num_cells: config.cells[s],
                nodes: plan.nodes,
                in_channels: plan.hyper_in(s),
                out_channels: plan.hyper[s],
            };
            let edges = CellSpec::new(CellKind::Normal, plan.nodes).num_edges();
            let ops = vec![vec![all.clone(); edges]; spec.num_cells];
            let prefix = format!("hc{s}");
            let mut hc = HyperCell::build(&mut pb, &prefix, spec, &ops, s < 2)?;
            let normal = pb.logits(&format!("{prefix}.alpha_normal"), ParamGroup::Alpha, edges, k)?;
            let reduce = if config.share_reduction_alpha {
                normal
            } else {
                pb.logits(&format!("{prefix}.alpha_reduce"), ParamGroup::Alpha, edges, k)?
            };
            let depth = pb.logits(&format!("{prefix}.beta"), ParamGroup::Beta, 1, config.cells[s])?;
            hc.logits = Some(HyperLogits { reduce, normal, depth });
            hyper.push(hc);
        }
        let agg_all: Vec<(usize, AggOp)> = config.agg_ops.iter().copied().enumerate().collect();
        let agg = Aggregation::build(
            &mut pb,
            "agg",
            plan.hyper,
            plan.agg_width,
            &vec![agg_all; AGG_EDGES.len()],
        )?;
        let agg_logits = pb.logits("agg.alpha", ParamGroup::AggAlpha, AGG_EDGES.len(), config.agg_ops.len())?;
        let (head_w, head_b) = build_head(&mut pb, &plan)?;
        Ok((
            Self {
                plan,
                stem,
                hyper,
                agg,
                head_w,
                head_b,
                agg_logits: Some(agg_logits),
                cell_ops: config.cell_ops.clone(),
                agg_ops: config.agg_ops.clone(),
            },
            store,
        ))
    }

    /// The discrete network described by `arch`. Parameter names match the
    /// super-network's, so searched weights can be copied over by name.
    pub fn derived(arch: &DerivedArchitecture, seed: u64) -> Result<(Self, ParamStore)> {
        arch.validate()?;
        let plan = arch.channel_plan.clone();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let stem = build_stem(&mut pb, plan.stem)?;
        let mut hyper = Vec::with_capacity(3);
        for (s, h) in arch.hyper_cells.iter().enumerate() {
            let spec = HyperSpec {
                num_cells: h.initial_cells,
                nodes: plan.nodes,
                in_channels: plan.hyper_in(s),
                out_channels: plan.hyper[s],
            };
            let ops: Vec<Vec<Vec<(usize, CellOp)>>> = h
                .cells
                .iter()
                .map(|c| c.edges.iter().map(|e| vec![(0, e.op)]).collect())
                .collect();
            // The input only stands in for the penultimate state when the
            // hyper-cell keeps its reduction cell alone.
            let with_penult = s < 2 && h.depth == 1;
            hyper.push(HyperCell::build(&mut pb, &format!("hc{s}"), spec, &ops, with_penult)?);
        }
        let agg_ops: Vec<Vec<(usize, AggOp)>> = arch.aggregation.edges.iter().map(|e| vec![(0, e.op)]).collect();
        let agg = Aggregation::build(&mut pb, "agg", plan.hyper, plan.agg_width, &agg_ops)?;
        let (head_w, head_b) = build_head(&mut pb, &plan)?;
        Ok((
            Self {
                plan,
                stem,
                hyper,
                agg,
                head_w,
                head_b,
                agg_logits: None,
                cell_ops: Vec::new(),
                agg_ops: Vec::new(),
            },
            store,
        ))
    }

    pub fn is_relaxed(&self) -> bool {
        self.agg_logits.is_some()
    }

    /// Logits parameter behind a mask site.
    pub fn logits_at(&self, site: MaskSite) -> Option<ParamId> {
        match site {
            MaskSite::Depth(s) => self.hyper.get(s)?.logits.map(|l| l.depth),
            MaskSite::Cell(s, 0) => self.hyper.get(s)?.logits.map(|l| l.reduce),
            MaskSite::Cell(s, _) => self.hyper.get(s)?.logits.map(|l| l.normal),
            MaskSite::Agg => self.agg_logits,
        }
    }

    /// Every mask site in sampling order.
    pub fn mask_sites(&self) -> Vec<MaskSite> {
        let mut sites = Vec::new();
        for (s, h) in self.hyper.iter().enumerate() {
            sites.push(MaskSite::Depth(s));
            sites.extend((0..h.cells.len()).map(|p| MaskSite::Cell(s, p)));
        }
        sites.push(MaskSite::Agg);
        sites
    }

    /// Differentiable Gumbel-Softmax masks; each cell draws its own noise,
    /// even where cells share logits.
    pub fn sample_masks(&self, ctx: &mut Ctx<'_>, sampler: &mut GumbelSampler) -> Result<NetMasks> {
        self.build_masks(|site| {
            let id = self.logits_at(site).ok_or_else(not_relaxed)?;
            let logits = ctx.var(id);
            gumbel_softmax_rows(ctx.tape, logits, sampler)
        })
    }

    /// Constant masks computed from the current logit values, e.g. one-hot
    /// argmax masks or plain softmax expectations.
    pub fn masks_with<F>(&self, ctx: &mut Ctx<'_>, mut f: F) -> Result<NetMasks>
    where
        F: FnMut(MaskSite, &[f64], usize) -> Result<Vec<f64>>,
    {
        self.build_masks(|site| {
            let id = self.logits_at(site).ok_or_else(not_relaxed)?;
            let t = ctx.store.get(id);
            let shape = t.shape();
            let values = f(site, t.data(), shape.c)?;
            ctx.tape.constant(shape, values)
        })
    }

    fn build_masks(&self, mut make: impl FnMut(MaskSite) -> Result<Var>) -> Result<NetMasks> {
        let mut hyper = Vec::with_capacity(self.hyper.len());
        for (s, h) in self.hyper.iter().enumerate() {
            let depth = make(MaskSite::Depth(s))?;
            let cells = (0..h.cells.len())
                .map(|p| make(MaskSite::Cell(s, p)))
                .collect::<Result<Vec<_>>>()?;
            hyper.push(HyperMasks { depth, cells });
        }
        let agg = make(MaskSite::Agg)?;
        Ok(NetMasks { hyper, agg })
    }

    /// Per-pixel class logits at the input resolution.
    pub fn forward(&self, ctx: &mut Ctx<'_>, image: Var, masks: Option<&NetMasks>) -> Result<Var> {
        let input = ctx.tape.shape(image);
        if input.c != 3 || !input.h.is_multiple_of(NETWORK_STRIDE) || !input.w.is_multiple_of(NETWORK_STRIDE) {
            return Err(Error::invalid(
                "network_forward",
                format!("expected RGB input with sides divisible by {NETWORK_STRIDE}, got {input}"),
            ));
        }
        let taps = self.features(ctx, image, masks)?;
        let y = self.agg.forward(ctx, taps, masks.map(|m| m.agg))?;
        let w = ctx.var(self.head_w);
        let y = ctx.tape.conv2d(y, w, 1, 1, 1)?;
        let b = ctx.var(self.head_b);
        let y = ctx.tape.add_bias(y, b)?;
        let factor = input.h / ctx.tape.shape(y).h;
        ctx.tape.upsample(y, factor)
    }

    /// The three hyper-cell outputs.
    pub fn features(&self, ctx: &mut Ctx<'_>, image: Var, masks: Option<&NetMasks>) -> Result<[Var; 3]> {
        if masks.is_some() && !self.is_relaxed() {
            return Err(Error::invalid("network_forward", "derived networks take no masks"));
        }
        let mut x = image;
        for b in &self.stem {
            x = b.conv.forward(ctx, x)?;
            x = b.norm.forward(ctx, x)?;
            x = ctx.tape.relu(x)?;
        }
        let (mut x0, mut x1) = (x, x);
        let mut taps = Vec::with_capacity(3);
        for (s, h) in self.hyper.iter().enumerate() {
            let out = h.forward(ctx, x0, x1, masks.map(|m| &m.hyper[s]))?;
            taps.push(out.out);
            x0 = out.out;
            x1 = match out.penult {
                Some(p) => p,
                None if s + 1 == self.hyper.len() => out.out,
                None => return Err(Error::invalid("network_forward", "missing penultimate state")),
            };
        }
        Ok([taps[0], taps[1], taps[2]])
    }

    /// Spatial size of every stage for an input of `h x w`.
    pub fn stage_shapes(&self, h: usize, w: usize) -> [Shape4; 4] {
        let at = |stride: usize, c: usize| Shape4::new(1, c, h.div_ceil(stride), w.div_ceil(stride));
        [
            at(STEM_STRIDE, self.plan.stem),
            at(STEM_STRIDE * 2, self.plan.hyper[0]),
            at(STEM_STRIDE * 4, self.plan.hyper[1]),
            at(STEM_STRIDE * 8, self.plan.hyper[2]),
        ]
    }
}

fn not_relaxed() -> Error {
    Error::invalid("masks", "derived networks carry no architecture logits")
}
