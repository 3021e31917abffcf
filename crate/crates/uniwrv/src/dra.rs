//! Dynamic routing aggregation: flow estimation and warping, the path
//! controller, sparse modify-weight kernel routing, and deformable
//! multi-frame attention stacked over routing layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{mse_loss, Conv, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ops, Tape, Tensor};
use crate::wpgm::PriorRecord;

/// Frames in the sliding window: the triplet is fixed.
pub const WINDOW: usize = 3;

/// Shape of one routing stage.
#[derive(Debug, Clone, Copy)]
pub struct DraConfig {
    /// Feature width of the fusion stream.
    pub channels: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Sampling points per head per frame.
    pub points: usize,
    /// Optional routing paths.
    pub paths: usize,
    /// Stacked routing layers.
    pub layers: usize,
}

impl DraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.points == 0 {
            return Err(Error::Config("DRA dimensions must be positive".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels do not divide across {} heads",
                self.channels, self.heads
            )));
        }
        if self.paths < 2 {
            return Err(Error::Config("routing needs at least 2 paths".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one routing layer".into()));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.heads * WINDOW * self.points
    }
}

/// Per-sample record of routing weights and queried prior indices.
#[derive(Debug, Clone, Default)]
pub struct RouteTrace {
    pub alphas: Vec<Vec<f64>>,
    pub prior_indices: Vec<usize>,
}

/// Four modify vectors per path, matching the host kernel's dimensions.
/// All-ones at init, so routing starts as the identity modifier.
pub struct ModifySet {
    pub u: ParamId,
    pub v: ParamId,
    pub cin: ParamId,
    pub cout: ParamId,
    pub paths: usize,
    k: usize,
    cin_dim: usize,
    cout_dim: usize,
}

impl ModifySet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        paths: usize,
        k: usize,
        cin: usize,
        cout: usize,
    ) -> ModifySet {
        ModifySet {
            u: store.add_ones(format!("{name}.u"), &[paths, k]),
            v: store.add_ones(format!("{name}.v"), &[paths, k]),
            cin: store.add_ones(format!("{name}.cin"), &[paths, cin]),
            cout: store.add_ones(format!("{name}.cout"), &[paths, cout]),
            paths,
            k,
            cin_dim: cin,
            cout_dim: cout,
        }
    }

    /// Learnable values beyond the base kernel: `P * (2k + Cin + Cout)`.
    pub fn value_count(&self) -> usize {
        self.paths * (2 * self.k + self.cin_dim + self.cout_dim)
    }
}

/// Convolution whose kernel is modulated per sample by routing weights.
pub struct RoutedConv {
    pub w: ParamId,
    pub b: ParamId,
    pub mods: ModifySet,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pad: usize,
}

impl RoutedConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        paths: usize,
        rng: &mut ChaCha8Rng,
    ) -> RoutedConv {
        RoutedConv {
            w: store.add_conv_kernel(format!("{name}.w"), k, cin, cout, rng),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
            mods: ModifySet::new(store, name, paths, k, cin, cout),
            k,
            cin,
            cout,
            pad: k / 2,
        }
    }

    /// Zero-initialized base kernel (offset heads start as identity).
    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        paths: usize,
    ) -> RoutedConv {
        RoutedConv {
            w: store.add_zeros(format!("{name}.w"), &[k, k, cin, cout]),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
            mods: ModifySet::new(store, name, paths, k, cin, cout),
            k,
            cin,
            cout,
            pad: k / 2,
        }
    }

    pub fn routed_kernel(&self, store: &ParamStore, tape: &Tape, alpha: &Tensor) -> Result<Tensor> {
        ops::route_kernel(
            tape,
            &store.get(self.w),
            &store.get(self.mods.u),
            &store.get(self.mods.v),
            &store.get(self.mods.cin),
            &store.get(self.mods.cout),
            alpha,
        )
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        x: &Tensor,
        alpha: &Tensor,
    ) -> Result<Tensor> {
        let kernel = self.routed_kernel(store, tape, alpha)?;
        let y = ops::conv2d(tape, x, &kernel, 1, self.pad)?;
        ops::bias_add(tape, &y, &store.get(self.b))
    }

    /// Off-tape kernel of a single materialized branch: `outer(B_i) .* W`
    /// (the per-path node kernel of the vanilla multi-branch scheme).
    pub fn branch_kernel(&self, store: &ParamStore, path: usize) -> Tensor {
        let w = store.get(self.w);
        let (u, v) = (store.get(self.mods.u), store.get(self.mods.v));
        let (ci, co) = (store.get(self.mods.cin), store.get(self.mods.cout));
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        let data: Vec<f64> = (0..w.numel())
            .map(|idx| {
                let n = idx % cout;
                let m = (idx / cout) % cin;
                let b = (idx / (cout * cin)) % k;
                let a = idx / (cout * cin * k);
                u.data()[path * k + a]
                    * v.data()[path * k + b]
                    * ci.data()[path * cin + m]
                    * co.data()[path * cout + n]
                    * w.data()[idx]
            })
            .collect();
        Tensor::new(&[k, k, cin, cout], data)
    }
}

/// Both displacement maps at quarter resolution, in pixels of that grid.
pub struct FlowField {
    pub from_prev: Tensor,
    pub from_next: Tensor,
}

/// Small convolutional flow predictor, shared across both directions and
/// trained only by the warp loss. The final head is zero-initialized so
/// flow starts at exactly zero.
pub struct FlowEstimator {
    trunk: Vec<Conv>,
    head: Conv,
}

impl FlowEstimator {
    /// Ids of every predictor parameter (the warp loss trains these alone).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.trunk.iter().flat_map(|c| [c.w, c.b]).collect();
        ids.push(self.head.w);
        ids.push(self.head.b);
        ids
    }

    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let trunk = vec![
            Conv::new(store, &format!("{name}.c1"), 3, 6, hidden, rng),
            Conv::new(store, &format!("{name}.c2"), 3, hidden, hidden, rng),
            Conv::new(store, &format!("{name}.c3"), 3, hidden, hidden, rng),
            Conv::new(store, &format!("{name}.c4"), 3, hidden, hidden, rng),
        ];
        let head = Conv::new_zero(store, &format!("{name}.head"), 3, hidden, 2);
        FlowEstimator { trunk, head }
    }

    fn direction(
        &self,
        store: &ParamStore,
        tape: &Tape,
        from: &Tensor,
        to: &Tensor,
    ) -> Result<Tensor> {
        let mut h = ops::concat_channels(tape, &[from, to])?;
        for conv in &self.trunk {
            h = ops::relu(tape, &conv.forward(store, tape, &h)?)?;
        }
        self.head.forward(store, tape, &h)
    }

    /// Predict flows that map the adjacent downsampled frames onto the
    /// center one.
    pub fn estimate(
        &self,
        store: &ParamStore,
        tape: &Tape,
        prev_down: &Tensor,
        mid_down: &Tensor,
        next_down: &Tensor,
    ) -> Result<FlowField> {
        for t in [prev_down, mid_down, next_down] {
            if t.shape() != prev_down.shape() {
                return Err(Error::shape(
                    "estimate_flow",
                    format!("frame grids differ: {:?} vs {:?}", t.shape(), prev_down.shape()),
                ));
            }
        }
        Ok(FlowField {
            from_prev: self.direction(store, tape, prev_down, mid_down)?,
            from_next: self.direction(store, tape, next_down, mid_down)?,
        })
    }
}

/// `|G_mid - warp(G_prev)|^2 + |G_mid - warp(G_next)|^2`, mean-reduced.
pub fn warp_loss(
    tape: &Tape,
    g_prev_down: &Tensor,
    g_mid_down: &Tensor,
    g_next_down: &Tensor,
    flows: &FlowField,
) -> Result<Tensor> {
    let warped_prev = ops::warp(tape, g_prev_down, &flows.from_prev)?;
    let warped_next = ops::warp(tape, g_next_down, &flows.from_next)?;
    let a = mse_loss(tape, g_mid_down, &warped_prev)?;
    let b = mse_loss(tape, g_mid_down, &warped_next)?;
    ops::add(tape, &a, &b)
}

/// Tile every queried prior to `target_len` and average them elementwise.
pub fn aggregate_prior(
    tape: &Tape,
    records: &[PriorRecord],
    target_len: usize,
) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Config("aggregate_prior needs at least one record".into()));
    }
    let mut acc: Option<Tensor> = None;
    for rec in records {
        if target_len % rec.prior.numel() != 0 {
            return Err(Error::Config(format!(
                "prior of length {} does not divide target {}",
                rec.prior.numel(),
                target_len
            )));
        }
        let tiled = ops::tile_to(tape, &rec.prior, target_len)?;
        acc = Some(match acc {
            None => tiled,
            Some(a) => ops::add(tape, &a, &tiled)?,
        });
    }
    ops::scale(tape, &acc.unwrap(), 1.0 / records.len() as f64)
}

/// Maps fused features plus the aggregated prior to routing weights.
pub struct PathController {
    proj: Linear,
}

impl PathController {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        paths: usize,
        rng: &mut ChaCha8Rng,
    ) -> PathController {
        PathController {
            proj: Linear::new(store, &format!("{name}.proj"), paths, channels, rng),
        }
    }

    /// `softmax(conv1x1(pool(M_n + broadcast(prior))))`
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        fused: &Tensor,
        agg_prior: &Tensor,
    ) -> Result<Tensor> {
        let prompted = ops::bias_add(tape, fused, agg_prior)?;
        let pooled = ops::global_avg_pool(tape, &prompted)?;
        let logits = self.proj.forward(store, tape, &pooled)?;
        ops::softmax(tape, &logits)
    }
}

/// Gumbel-softmax sample of a routing vector with the user-supplied noise.
fn harden_with_noise(
    tape: &Tape,
    alpha: &Tensor,
    temperature: f64,
    noise: &[f64],
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    if noise.len() != alpha.numel() {
        return Err(Error::shape(
            "harden",
            format!("{} noise values for {} paths", noise.len(), alpha.numel()),
        ));
    }
    let logits = ops::ln(tape, alpha)?;
    let noisy = ops::add(tape, &logits, &Tensor::new(alpha.shape(), noise.to_vec()))?;
    let scaled = ops::scale(tape, &noisy, 1.0 / temperature)?;
    let soft = ops::softmax(tape, &scaled)?;
    let argmax = soft
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let mut hard = vec![0.0; soft.numel()];
    hard[argmax] = 1.0;
    ops::straight_through(tape, &soft, hard)
}

/// Straight-through Gumbel-softmax hardening of soft routing weights.
/// Off by default; selection frequency follows the soft weights.
pub fn harden(
    tape: &Tape,
    alpha: &Tensor,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let noise: Vec<f64> = (0..alpha.numel())
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    harden_with_noise(tape, alpha, temperature, &noise)
}

/// One routing layer: controller, three routed projections, deformable
/// gather, and a routed output convolution inside a residual connection.
pub struct DraLayer {
    pub controller: PathController,
    pub attn_proj: RoutedConv,
    pub offset_proj: RoutedConv,
    pub value_proj: RoutedConv,
    pub out_proj: RoutedConv,
    pub cfg: DraConfig,
}

impl DraLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DraConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<DraLayer> {
        cfg.validate()?;
        let c = cfg.channels;
        let slots = cfg.slots();
        Ok(DraLayer {
            controller: PathController::new(store, &format!("{name}.ctrl"), c, cfg.paths, rng),
            attn_proj: RoutedConv::new(store, &format!("{name}.attn"), 3, 3 * c, slots, cfg.paths, rng),
            offset_proj: RoutedConv::new_zero(
                store,
                &format!("{name}.offset"),
                3,
                3 * c,
                2 * slots,
                cfg.paths,
            ),
            value_proj: RoutedConv::new(
                store,
                &format!("{name}.value"),
                3,
                3 * c,
                c * WINDOW,
                cfg.paths,
                rng,
            ),
            out_proj: RoutedConv::new(store, &format!("{name}.out"), 3, c, c, cfg.paths, rng),
            cfg,
        })
    }

    /// Project attention weights (per-head softmax over its T*K slots),
    /// sampling offsets, and value maps. Attention and offsets see warped
    /// neighbors; values see the unwarped ones.
    pub fn dma_project(
        &self,
        store: &ParamStore,
        tape: &Tape,
        fused: &Tensor,
        f_prev_warped: &Tensor,
        f_next_warped: &Tensor,
        f_prev: &Tensor,
        f_next: &Tensor,
        alpha: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let warped_cat = ops::concat_channels(tape, &[f_prev_warped, fused, f_next_warped])?;
        let attn_raw = self.attn_proj.forward(store, tape, &warped_cat, alpha)?;
        let attn = ops::softmax_rows(tape, &attn_raw, WINDOW * self.cfg.points)?;
        let offsets = self.offset_proj.forward(store, tape, &warped_cat, alpha)?;
        let value_cat = ops::concat_channels(tape, &[fused, f_prev, f_next])?;
        let values = self.value_proj.forward(store, tape, &value_cat, alpha)?;
        Ok((attn, offsets, values))
    }

    /// Deformable attention over the projected maps plus the routed output
    /// convolution.
    pub fn deformable_attention(
        &self,
        store: &ParamStore,
        tape: &Tape,
        attn: &Tensor,
        offsets: &Tensor,
        values: &Tensor,
        alpha: &Tensor,
    ) -> Result<Tensor> {
        let gathered = ops::deformable_gather(
            tape,
            values,
            attn,
            offsets,
            self.cfg.heads,
            WINDOW,
            self.cfg.points,
        )?;
        self.out_proj.forward(store, tape, &gathered, alpha)
    }

    /// Full layer with an externally chosen routing vector.
    pub fn forward_routed(
        &self,
        store: &ParamStore,
        tape: &Tape,
        fused: &Tensor,
        f_prev: &Tensor,
        f_next: &Tensor,
        f_prev_warped: &Tensor,
        f_next_warped: &Tensor,
        alpha: &Tensor,
    ) -> Result<Tensor> {
        let (attn, offsets, values) = self.dma_project(
            store,
            tape,
            fused,
            f_prev_warped,
            f_next_warped,
            f_prev,
            f_next,
            alpha,
        )?;
        let out = self.deformable_attention(store, tape, &attn, &offsets, &values, alpha)?;
        ops::add(tape, fused, &out)
    }

    /// `M_{n+1} = M_n + DefAtt(...)` with the controller's routing weights.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        fused: &Tensor,
        f_prev: &Tensor,
        f_next: &Tensor,
        f_prev_warped: &Tensor,
        f_next_warped: &Tensor,
        agg_prior: &Tensor,
        hard: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(Tensor, Tensor)> {
        let mut alpha = self.controller.forward(store, tape, fused, agg_prior)?;
        if let Some((temperature, rng)) = hard {
            alpha = harden(tape, &alpha, temperature, rng)?;
        }
        let next = self.forward_routed(
            store,
            tape,
            fused,
            f_prev,
            f_next,
            f_prev_warped,
            f_next_warped,
            &alpha,
        )?;
        Ok((next, alpha))
    }
}

#[cfg(test)]
mod tests;
