//! The resizable ViT.
//!
//! One transformer trunk (attention and MLP weights, class and distillation
//! tokens, both heads) is shared by every token length. Each length `i`
//! owns its own patch projection, positional table, and a separate
//! LayerNorm parameter set at every normalization site.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ReViTConfig, TokenSchedule};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Rows of every positional table: class slot, distillation slot, then patches.
pub const POS_SPECIAL_SLOTS: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameters owned by one token length.
#[derive(Clone, Debug)]
pub struct LengthBank {
    pub patch: LinearIds,
    pub pos: ParamId,
    /// `(ln1, ln2)` for each block.
    pub block_norms: Vec<(NormIds, NormIds)>,
    pub final_norm: NormIds,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub qkv: LinearIds,
    pub proj: LinearIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    banks: Vec<LengthBank>,
    blocks: Vec<BlockIds>,
    cls_token: ParamId,
    dist_token: ParamId,
    head: LinearIds,
    dist_head: LinearIds,
    /// Canonical `(name, shape)` in insertion order.
    entries: Vec<(String, Vec<usize>)>,
}

/// Logits produced by [`ReViT::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[b, classes]` from the class token.
    pub class_logits: Var,
    /// `[b, classes]` from the distillation token, when it was present.
    pub distill_logits: Option<Var>,
}

/// Architecture plus the fixed mapping from parameter roles to store slots.
/// Any store produced by [`ReViT::init_params`] or accepted by
/// [`ReViT::check_store`] can be used with it.
#[derive(Clone, Debug)]
pub struct ReViT {
    config: ReViTConfig,
    schedule: TokenSchedule,
    layout: Layout,
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.entries.push((name, shape));
        ParamId(self.entries.len() - 1)
    }
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        LinearIds {
            weight: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out]),
            bias: self.add(format!("{prefix}.bias"), vec![fan_out]),
        }
    }
    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{prefix}.gamma"), vec![d]),
            beta: self.add(format!("{prefix}.beta"), vec![d]),
        }
    }
}

impl ReViT {
    pub fn new(config: ReViTConfig) -> Result<Self> {
        let schedule = config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut b = LayoutBuilder { entries: Vec::new() };

        let shared = config.shared_embed.then(|| {
            let p = schedule.patch_size(0);
            (
                b.linear("patch_embed", config.channels * p * p, d),
                b.add("pos_embed".into(), vec![schedule.tokens(0) + POS_SPECIAL_SLOTS, d]),
            )
        });
        let mut banks = Vec::with_capacity(schedule.len());
        for i in 0..schedule.len() {
            let (patch, pos) = match shared {
                Some(ids) => ids,
                None => {
                    let p = schedule.patch_size(i);
                    (
                        b.linear(&format!("patch_embed.{i}"), config.channels * p * p, d),
                        b.add(
                            format!("pos_embed.{i}"),
                            vec![schedule.tokens(i) + POS_SPECIAL_SLOTS, d],
                        ),
                    )
                }
            };
            let block_norms = (0..config.depth)
                .map(|blk| {
                    (
                        b.norm(&format!("blocks.{blk}.ln1.{i}"), d),
                        b.norm(&format!("blocks.{blk}.ln2.{i}"), d),
                    )
                })
                .collect();
            let final_norm = b.norm(&format!("final_ln.{i}"), d);
            banks.push(LengthBank {
                patch,
                pos,
                block_norms,
                final_norm,
            });
        }
        let blocks = (0..config.depth)
            .map(|blk| BlockIds {
                qkv: b.linear(&format!("blocks.{blk}.attn.qkv"), d, 3 * d),
                proj: b.linear(&format!("blocks.{blk}.attn.proj"), d, d),
                fc1: b.linear(&format!("blocks.{blk}.mlp.fc1"), d, hidden),
                fc2: b.linear(&format!("blocks.{blk}.mlp.fc2"), hidden, d),
            })
            .collect();
        let cls_token = b.add("cls_token".into(), vec![d]);
        let dist_token = b.add("dist_token".into(), vec![d]);
        let head = b.linear("head", d, config.num_classes);
        let dist_head = b.linear("dist_head", d, config.num_classes);

        Ok(Self {
            config,
            schedule,
            layout: Layout {
                banks,
                blocks,
                cls_token,
                dist_token,
                head,
                dist_head,
                entries: b.entries,
            },
        })
    }

    pub fn config(&self) -> &ReViTConfig {
        &self.config
    }

    pub fn schedule(&self) -> &TokenSchedule {
        &self.schedule
    }

    pub fn num_lengths(&self) -> usize {
        self.schedule.len()
    }

    pub fn bank(&self, i: usize) -> &LengthBank {
        &self.layout.banks[i]
    }

    pub fn blocks(&self) -> &[BlockIds] {
        &self.layout.blocks
    }

    /// Every parameter owned by length `i`. With `shared_embed` the patch
    /// projection and positional table are shared, not owned.
    pub fn bank_param_ids(&self, i: usize) -> Vec<ParamId> {
        let bank = &self.layout.banks[i];
        let mut ids = Vec::new();
        if !self.config.shared_embed {
            ids.extend([bank.patch.weight, bank.patch.bias, bank.pos]);
        }
        for (a, b) in &bank.block_norms {
            ids.extend([a.gamma, a.beta, b.gamma, b.beta]);
        }
        ids.extend([bank.final_norm.gamma, bank.final_norm.beta]);
        ids
    }

    /// Parameters shared by all lengths.
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let banked: std::collections::HashSet<ParamId> =
            (0..self.num_lengths()).flat_map(|i| self.bank_param_ids(i)).collect();
        (0..self.layout.entries.len())
            .map(ParamId)
            .filter(|id| !banked.contains(id))
            .collect()
    }

    /// Canonical parameter names and shapes, in store order.
    pub fn param_layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout.entries
    }

    /// Fresh parameters: N(0, 1/fan_in) for weight matrices, N(0, 0.02²) for
    /// tokens and positional tables, zero biases, unit norm gains.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in &self.layout.entries {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.ends_with(".weight") {
                Tensor::randn(shape, (shape[0] as f64).recip().sqrt(), &mut rng)
            } else {
                Tensor::randn(shape, INIT_STD, &mut rng)
            };
            store.insert(name.clone(), t).expect("unique names");
        }
        store
    }

    /// Verifies that `store` has this model's names, order and shapes.
    pub fn check_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.layout.entries.len() {
            return Err(Error::Validation(format!(
                "store has {} tensors, model expects {}",
                store.len(),
                self.layout.entries.len()
            )));
        }
        for ((id, name, t), (want_name, want_shape)) in store.iter().zip(&self.layout.entries) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter #{}: found `{name}` {:?}, expected `{want_name}` {want_shape:?}",
                    id.index(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Splits `[b, c, h, w]` images into `[b, n_i, c·p·p]` patch rows for
    /// length `i`. Patches are row-major over the grid; each row is flattened
    /// channel-major, then by pixel row, then pixel column.
    ///
    /// With `shared_embed` every row has the finest patch width `c·p₀·p₀`:
    /// each patch is average-pooled by `p_i / p₀` first, which is the same
    /// as applying the shared kernel stretched over the larger patch.
    pub fn patchify<T: Scalar>(&self, images: &Tensor<T>, length_idx: usize) -> Result<Tensor<T>> {
        self.schedule.check_index(length_idx)?;
        let s = images.shape();
        let want = [self.config.channels, self.config.image_size, self.config.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::dim("patchify", s, &want));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.schedule.patch_size(length_idx);
        let (rows, cols) = self.schedule.grid(length_idx);
        if self.config.shared_embed && length_idx > 0 {
            return Ok(pooled_patches(images, self.schedule.patch_size(0), p, rows, cols));
        }
        let width = c * p * p;
        let data = images.data();
        let mut out = Vec::with_capacity(b * rows * cols * width);
        for bi in 0..b {
            for gy in 0..rows {
                for gx in 0..cols {
                    for ch in 0..c {
                        for py in 0..p {
                            let off = ((bi * c + ch) * h + gy * p + py) * w + gx * p;
                            out.extend_from_slice(&data[off..off + p]);
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[b, rows * cols, width], out)
    }

    /// Patch tokens `[b, n_i, d]` projected with length `i`'s bank.
    pub fn patch_embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        length_idx: usize,
    ) -> Result<Var> {
        let patches = self.patchify(images, length_idx)?;
        let x = g.constant(patches);
        let bank = &self.layout.banks[length_idx];
        linear(g, store, x, bank.patch)
    }

    /// Prepends the class token (and the distillation token when requested)
    /// and adds length `i`'s positional table.
    pub fn assemble_sequence<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        length_idx: usize,
        with_distill: bool,
    ) -> Result<Var> {
        self.schedule.check_index(length_idx)?;
        let n = g.shape(tokens).get(1).copied().unwrap_or(0);
        if n != self.schedule.tokens(length_idx) {
            return Err(Error::dim(
                "assemble_sequence",
                g.shape(tokens),
                &[self.schedule.tokens(length_idx)],
            ));
        }
        let cls = g.param(store, self.layout.cls_token);
        let mut pos = g.param(store, self.layout.banks[length_idx].pos);
        if self.config.shared_embed && length_idx > 0 {
            let pool = g.constant(self.pos_pooling(length_idx));
            pos = g.matmul(pool, pos)?;
        }
        let (seq, pos) = if with_distill {
            let dist = g.param(store, self.layout.dist_token);
            (g.prepend_tokens(tokens, &[cls, dist])?, pos)
        } else {
            let rows: Vec<usize> = std::iter::once(0)
                .chain(POS_SPECIAL_SLOTS..POS_SPECIAL_SLOTS + n)
                .collect();
            (g.prepend_tokens(tokens, &[cls])?, g.gather_rows(pos, &rows)?)
        };
        g.add_broadcast(seq, pos)
    }

    /// `[n_i + 2, n_0 + 2]` map from the finest positional table to length
    /// `i`'s: special rows copied, each patch row the mean of the fine rows
    /// it covers.
    fn pos_pooling<T: Scalar>(&self, length_idx: usize) -> Tensor<T> {
        let (r0, c0) = self.schedule.grid(0);
        let (ri, ci) = self.schedule.grid(length_idx);
        let (sy, sx) = (r0 / ri, c0 / ci);
        let width = r0 * c0 + POS_SPECIAL_SLOTS;
        let mut m = vec![T::zero(); (ri * ci + POS_SPECIAL_SLOTS) * width];
        for k in 0..POS_SPECIAL_SLOTS {
            m[k * width + k] = T::one();
        }
        let weight = T::from_f64_lossy(1.0 / (sy * sx) as f64);
        for gy in 0..ri {
            for gx in 0..ci {
                let row = POS_SPECIAL_SLOTS + gy * ci + gx;
                for y in gy * sy..(gy + 1) * sy {
                    for x in gx * sx..(gx + 1) * sx {
                        m[row * width + POS_SPECIAL_SLOTS + y * c0 + x] = weight;
                    }
                }
            }
        }
        Tensor::from_vec(&[ri * ci + POS_SPECIAL_SLOTS, width], m).expect("consistent extents")
    }

    /// Pre-norm transformer blocks followed by the final norm, with every
    /// norm read from length `i`'s bank. `seq` is `[b, n, d]`.
    pub fn encoder_forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: Var,
        length_idx: usize,
        mut dropout: Option<&mut R>,
    ) -> Result<Var> {
        self.schedule.check_index(length_idx)?;
        let bank = &self.layout.banks[length_idx];
        let heads = self.config.heads;
        let head_dim = self.config.embed_dim / heads;
        let eps = self.config.ln_eps;
        let rate = if dropout.is_some() { self.config.dropout } else { 0.0 };
        let mut x = seq;
        for (blk, (ln1, ln2)) in self.layout.blocks.iter().zip(&bank.block_norms) {
            let h = norm(g, store, x, *ln1, eps)?;
            let qkv = linear(g, store, h, blk.qkv)?;
            let q = g.split_heads(qkv, 0, 3, heads)?;
            let k = g.split_heads(qkv, 1, 3, heads)?;
            let v = g.split_heads(qkv, 2, 3, heads)?;
            let scores = g.batch_matmul(q, k, true)?;
            let attn = g.softmax(scores, (head_dim as f64).sqrt())?;
            let ctx = g.batch_matmul(attn, v, false)?;
            let ctx = g.merge_heads(ctx)?;
            let out = linear(g, store, ctx, blk.proj)?;
            let out = maybe_dropout(g, out, rate, dropout.as_deref_mut())?;
            x = g.add(x, out)?;

            let h = norm(g, store, x, *ln2, eps)?;
            let h = linear(g, store, h, blk.fc1)?;
            let h = g.gelu(h);
            let h = linear(g, store, h, blk.fc2)?;
            let h = maybe_dropout(g, h, rate, dropout.as_deref_mut())?;
            x = g.add(x, h)?;
        }
        norm(g, store, x, bank.final_norm, eps)
    }

    /// Full forward for a batch `[b, c, h, w]` at length `i`. Passing an RNG
    /// enables dropout at the configured rate.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        length_idx: usize,
        with_distill: bool,
        mut dropout: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let tokens = self.patch_embed(g, store, images, length_idx)?;
        let seq = self.assemble_sequence(g, store, tokens, length_idx, with_distill)?;
        let rate = if dropout.is_some() { self.config.dropout } else { 0.0 };
        let seq = maybe_dropout(g, seq, rate, dropout.as_deref_mut())?;
        let enc = self.encoder_forward(g, store, seq, length_idx, dropout)?;
        let cls = g.select_token(enc, 0)?;
        let class_logits = linear(g, store, cls, self.layout.head)?;
        let distill_logits = if with_distill {
            let dist = g.select_token(enc, 1)?;
            Some(linear(g, store, dist, self.layout.dist_head)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            class_logits,
            distill_logits,
        })
    }

    /// Inference-mode class logits `[b, classes]` (no distillation token, no dropout).
    pub fn class_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        length_idx: usize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward::<T, ChaCha8Rng>(&mut g, store, images, length_idx, false, None)?;
        Ok(g.value(out.class_logits).clone())
    }

    /// Argmax class per image at length `i`.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        length_idx: usize,
    ) -> Result<Vec<usize>> {
        let logits = self.class_logits(store, images, length_idx)?;
        let c = self.config.num_classes;
        Ok(logits.data().chunks(c).map(crate::numerics::argmax).collect())
    }
}

/// Patch rows of edge `p` average-pooled down to edge `p0`: entry
/// `(ch, y, x)` of a row is the mean of the `s×s` pixel block it covers,
/// `s = p / p0`.
fn pooled_patches<T: Scalar>(images: &Tensor<T>, p0: usize, p: usize, rows: usize, cols: usize) -> Tensor<T> {
    let sh = images.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let s = p / p0;
    let scale = T::from_f64_lossy(1.0 / (s * s) as f64);
    let data = images.data();
    let mut out = Vec::with_capacity(b * rows * cols * c * p0 * p0);
    for bi in 0..b {
        for gy in 0..rows {
            for gx in 0..cols {
                for ch in 0..c {
                    let plane = &data[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                    for py in 0..p0 {
                        for px in 0..p0 {
                            let (y0, x0) = (gy * p + py * s, gx * p + px * s);
                            let mut acc = T::zero();
                            for y in y0..y0 + s {
                                for x in x0..x0 + s {
                                    acc += plane[y * w + x];
                                }
                            }
                            out.push(acc * scale);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, rows * cols, c * p0 * p0], out).expect("consistent extents")
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ids: LinearIds) -> Result<Var> {
    let w = g.param(store, ids.weight);
    let b = g.param(store, ids.bias);
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

fn norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ids: NormIds, eps: f64) -> Result<Var> {
    let gamma = g.param(store, ids.gamma);
    let beta = g.param(store, ids.beta);
    g.layer_norm(x, gamma, beta, eps)
}

fn maybe_dropout<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => Ok(x),
    }
}
