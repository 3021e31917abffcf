//! Weather-prior guided feature extraction.
//!
//! Each layer embeds its input map as a compressed latent, queries the
//! nearest prior vector out of a learnable per-layer bank, broadcast-adds it
//! as a prompt, and runs a pluggable extraction block. Two losses keep the
//! banks and the mapping nets aligned.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{cosine, logsumexp, normalize, Conv};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ops, Tape, Tensor};

/// Per-layer bank of learnable prior vectors plus query-usage counters.
pub struct PriorBank {
    pub layer: usize,
    pub width: usize,
    pub entries: usize,
    pub param: ParamId,
    counts: RefCell<Vec<u64>>,
}

impl PriorBank {
    /// Vectors start uniform in [-0.5, 0.5] so initial queries are distinct.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layer: usize,
        width: usize,
        entries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PriorBank> {
        if entries < 2 {
            return Err(Error::Config(format!(
                "prior bank needs at least 2 entries, got {entries}"
            )));
        }
        let param = store.add_uniform(format!("{name}.bank"), &[entries, width], 0.5, rng);
        Ok(PriorBank {
            layer,
            width,
            entries,
            param,
            counts: RefCell::new(vec![0; entries]),
        })
    }

    /// Index of the L2-nearest row; ties break to the lowest index.
    pub fn nearest(&self, store: &ParamStore, latent: &Tensor) -> Result<usize> {
        if latent.shape() != [self.width] {
            return Err(Error::shape(
                "prior_query",
                format!("latent {:?} vs bank width {}", latent.shape(), self.width),
            ));
        }
        let bank = store.get(self.param);
        let bd = bank.data();
        let gd = latent.data();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..self.entries {
            let row = &bd[i * self.width..(i + 1) * self.width];
            let d: f64 = row.iter().zip(gd).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }

    /// Counted nearest-neighbor query. The returned prior is the live bank
    /// row, so downstream losses reach it; the selection itself carries no
    /// gradient.
    pub fn query(&self, store: &ParamStore, tape: &Tape, latent: &Tensor) -> Result<(Tensor, usize)> {
        let best = self.nearest(store, latent)?;
        self.counts.borrow_mut()[best] += 1;
        let prior = ops::select_row(tape, &store.get(self.param), best)?;
        Ok((prior, best))
    }

    pub fn usage(&self) -> Vec<u64> {
        self.counts.borrow().clone()
    }

    pub fn reset_usage(&self) {
        self.counts.borrow_mut().iter_mut().for_each(|c| *c = 0);
    }

    pub fn total_queries(&self) -> u64 {
        self.counts.borrow().iter().sum()
    }

    pub(crate) fn restore_usage(&self, counts: Vec<u64>) {
        assert_eq!(counts.len(), self.entries);
        *self.counts.borrow_mut() = counts;
    }
}

/// Two fully connected layers with a rectifier, applied to the pooled map.
pub struct MappingNet {
    pub fc1: crate::nn::Linear,
    pub fc2: crate::nn::Linear,
    pub width: usize,
}

impl MappingNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> MappingNet {
        MappingNet {
            fc1: crate::nn::Linear::new(store, &format!("{name}.fc1"), width, width, rng),
            fc2: crate::nn::Linear::new(store, &format!("{name}.fc2"), width, width, rng),
            width,
        }
    }

    /// Global average pool, then FC -> ReLU -> FC.
    pub fn embed(&self, store: &ParamStore, tape: &Tape, f: &Tensor) -> Result<Tensor> {
        let (_, _, c) = crate::tensor::ops::dims3("embed", f)?;
        if c != self.width {
            return Err(Error::shape(
                "embed",
                format!("feature has {} channels, mapping net expects {}", c, self.width),
            ));
        }
        let pooled = ops::global_avg_pool(tape, f)?;
        let h = ops::relu(tape, &self.fc1.forward(store, tape, &pooled)?)?;
        self.fc2.forward(store, tape, &h)
    }
}

/// What one layer recorded for one sample: the latent, the live prior row it
/// selected, and the bank it came from.
pub struct PriorRecord {
    pub layer: usize,
    pub latent: Tensor,
    pub prior: Tensor,
    pub index: usize,
    /// Live handle to the full bank matrix (negatives for the contrastive
    /// loss reach the same gradient slot as the stored parameter).
    pub bank: Tensor,
}

impl PriorRecord {
    pub fn bank_entries(&self) -> usize {
        self.bank.shape()[0]
    }
}

/// Pluggable feature extraction block run after prompt injection.
pub trait ExtractionBlock {
    fn forward(&self, store: &ParamStore, tape: &Tape, x: &Tensor) -> Result<Tensor>;
}

/// conv3x3 -> ReLU -> conv3x3 with a skip from the block input.
pub struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), 3, channels, channels, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), 3, channels, channels, rng),
        }
    }
}

impl ExtractionBlock for ResidualBlock {
    fn forward(&self, store: &ParamStore, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = ops::relu(tape, &self.conv1.forward(store, tape, x)?)?;
        let h = self.conv2.forward(store, tape, &h)?;
        ops::add(tape, &h, x)
    }
}

/// Pass-through block (test fixture).
pub struct IdentityBlock;

impl ExtractionBlock for IdentityBlock {
    fn forward(&self, _store: &ParamStore, _tape: &Tape, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// One prior-guided layer: mapping net + bank + extraction block.
pub struct WpgmLayer {
    pub layer_index: usize,
    pub bank: PriorBank,
    pub map: MappingNet,
    pub block: Box<dyn ExtractionBlock>,
}

impl WpgmLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layer_index: usize,
        width: usize,
        entries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<WpgmLayer> {
        Ok(WpgmLayer {
            layer_index,
            bank: PriorBank::new(store, name, layer_index, width, entries, rng)?,
            map: MappingNet::new(store, &format!("{name}.map"), width, rng),
            block: Box::new(ResidualBlock::new(store, &format!("{name}.block"), width, rng)),
        })
    }

    /// Embed, query, inject the prior as a prompt, and run the block.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        f: &Tensor,
    ) -> Result<(Tensor, PriorRecord)> {
        let latent = self.map.embed(store, tape, f)?;
        let (prior, index) = self.bank.query(store, tape, &latent)?;
        let prompted = ops::bias_add(tape, f, &prior)?;
        let out = self.block.forward(store, tape, &prompted)?;
        let record = PriorRecord {
            layer: self.layer_index,
            latent,
            prior,
            index,
            bank: store.get(self.bank.param),
        };
        Ok((out, record))
    }

    /// Run the layer without a counted query (adjacent frames share weights,
    /// but only the center frame feeds the controller, the losses, and the
    /// usage statistics).
    pub fn forward_silent(&self, store: &ParamStore, tape: &Tape, f: &Tensor) -> Result<Tensor> {
        let latent = self.map.embed(store, tape, f)?;
        let best = self.bank.nearest(store, &latent)?;
        let prior = ops::select_row(tape, &store.get(self.bank.param), best)?;
        let prompted = ops::bias_add(tape, f, &prior)?;
        self.block.forward(store, tape, &prompted)
    }
}

pub struct PriorLossTerms {
    /// Pulls bank rows toward frozen latents.
    pub bank_term: Tensor,
    /// Pulls latents toward frozen bank rows.
    pub latent_term: Tensor,
    /// How many cosine terms hit a zero vector (contribute the constant 1).
    pub zero_cosine_flags: usize,
}

/// The two halves of the vector-level prior loss, kept separate so gradient
/// routing can be asserted exactly.
pub fn prior_vector_terms(tape: &Tape, records: &[PriorRecord]) -> Result<PriorLossTerms> {
    if records.is_empty() {
        return Err(Error::Config("prior loss needs at least one record".into()));
    }
    let mut flags = 0usize;
    let mut bank_term: Option<Tensor> = None;
    let mut latent_term: Option<Tensor> = None;
    let one = || Tensor::scalar(1.0);
    for rec in records {
        let frozen_latent = ops::stop_grad(tape, &rec.latent);
        let t1 = match cosine(tape, &rec.prior, &frozen_latent)? {
            Some(cos) => ops::sub(tape, &one(), &cos)?,
            None => {
                flags += 1;
                one()
            }
        };
        let frozen_prior = ops::stop_grad(tape, &rec.prior);
        let t2 = match cosine(tape, &frozen_prior, &rec.latent)? {
            Some(cos) => ops::sub(tape, &one(), &cos)?,
            None => {
                flags += 1;
                one()
            }
        };
        bank_term = Some(match bank_term {
            None => t1,
            Some(acc) => ops::add(tape, &acc, &t1)?,
        });
        latent_term = Some(match latent_term {
            None => t2,
            Some(acc) => ops::add(tape, &acc, &t2)?,
        });
    }
    Ok(PriorLossTerms {
        bank_term: bank_term.unwrap(),
        latent_term: latent_term.unwrap(),
        zero_cosine_flags: flags,
    })
}

/// Vector-level prior loss: `sum[1 - cos(q, sg(g))] + beta * sum[1 - cos(sg(q), g)]`.
pub fn prior_vector_loss(tape: &Tape, records: &[PriorRecord], beta: f64) -> Result<(Tensor, usize)> {
    let terms = prior_vector_terms(tape, records)?;
    let scaled = ops::scale(tape, &terms.latent_term, beta)?;
    let loss = ops::add(tape, &terms.bank_term, &scaled)?;
    Ok((loss, terms.zero_cosine_flags))
}

/// Per-layer InfoNCE over the bank: the positive is the queried row, the
/// other rows are negatives, all L2-normalized; the denominator includes the
/// positive so the loss stays non-negative.
pub fn prior_contrastive_loss(tape: &Tape, records: &[PriorRecord], tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if records.is_empty() {
        return Err(Error::Config("prior loss needs at least one record".into()));
    }
    let mut total: Option<Tensor> = None;
    for rec in records {
        if rec.bank_entries() < 2 {
            return Err(Error::Config("contrastive loss needs >= 2 bank entries".into()));
        }
        let ghat = normalize(tape, &rec.latent)?;
        let mut logits = Vec::with_capacity(rec.bank_entries());
        for i in 0..rec.bank_entries() {
            let row = ops::select_row(tape, &rec.bank, i)?;
            let qhat = normalize(tape, &row)?;
            let dot = ops::sum(tape, &ops::mul(tape, &ghat, &qhat)?)?;
            logits.push(ops::scale(tape, &dot, 1.0 / tau)?);
        }
        let lse = logsumexp(tape, &logits)?;
        let layer_loss = ops::sub(tape, &lse, &logits[rec.index])?;
        total = Some(match total {
            None => layer_loss,
            Some(acc) => ops::add(tape, &acc, &layer_loss)?,
        });
    }
    Ok(total.unwrap())
}
